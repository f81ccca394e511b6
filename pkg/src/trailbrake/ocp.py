"""Direct-collocation NLP layer.

Problems are expressed as weighted least-squares residuals plus an optional
smooth extra cost, subject to equality constraints (dynamics defects) and
variable box bounds.  The solver is a Gauss-Newton SQP: each quadratic
subproblem (equality plus box constraints) is handed to an interior-point QP
solver, and steps are globalized with an adaptive componentwise trust region
plus an L1 merit backtracking line search with a second-order correction.
Derivatives
come from forward-mode automatic differentiation, so cost and constraint
gradients are exact to machine precision.

All problem callables take (z, pb) where pb is an arbitrary pytree of
parameter arrays; the compiled derivative functions are reused across solves
with different parameter values (warm-start friendly).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable, Any

import clarabel
import numpy as np
import scipy.sparse as sp

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp

from .errors import GuessInvalidError

MAX_ITER_DEFAULT = 50
KKT_TOL_DEFAULT = 1e-6


def implicit_midpoint_defect(x_k, x_kp1, u_k, ds_k, dynamics, xp=jnp):
    """Second-order implicit Runge-Kutta (midpoint) defect residual.

    Zero iff x_{k+1} = x_k + ds_k * f((x_k + x_{k+1})/2, u_k).
    """
    x_mid = 0.5 * (x_k + x_kp1)
    return x_kp1 - x_k - ds_k * dynamics(x_mid, u_k)


@dataclass
class NlpProblem:
    """Weighted least-squares NLP with equality constraints and box bounds.

    cost(z) = sum_i weights_i * residuals(z, pb)_i^2 + extra_cost(z, pb)
    s.t.     equalities(z, pb) = 0,  lb <= z <= ub
    """

    n: int
    residuals: Callable[[Any, Any], Any]
    weights: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    equalities: Callable[[Any, Any], Any] | None = None
    extra_cost: Callable[[Any, Any], Any] | None = None
    z_scale: np.ndarray | None = None
    # optional hand-structured Jacobian of `equalities` (same row order);
    # lets sparse constraint systems skip the dense forward-mode sweep
    equalities_jac: Callable[[Any, Any], Any] | None = None


@dataclass
class NlpResult:
    z: np.ndarray
    multipliers: np.ndarray
    kkt_residual: float
    iterations: int
    converged: bool
    solve_time: float
    cost: float
    constraint_violation: float
    merit_drops: list = field(default_factory=list)  # (before, after, nu) per accepted step


class SqpSolver:
    """Gauss-Newton SQP with L1 merit line search and bound projection.

    Compile-once: derivative functions are jitted against the problem
    structure; repeated solves with new parameter bundles and warm starts
    reuse the compiled code.
    """

    def __init__(self, problem: NlpProblem, tol: float = KKT_TOL_DEFAULT,
                 max_iter: int = MAX_ITER_DEFAULT):
        self.problem = problem
        self.tol = tol
        self.max_iter = max_iter
        scale = (np.ones(problem.n) if problem.z_scale is None
                 else np.asarray(problem.z_scale, dtype=float))
        self.scale = scale
        self.w = np.asarray(problem.weights, dtype=float)

        s = jnp.asarray(scale)

        def _res(zs, pb):
            return problem.residuals(zs * s, pb)

        self._res = jax.jit(_res)
        self._jres = jax.jit(jax.jacfwd(_res))

        if problem.equalities is not None:
            def _eq(zs, pb):
                return problem.equalities(zs * s, pb)
            self._eq = jax.jit(_eq)
            self._jeq = jax.jit(jax.jacfwd(_eq))
        else:
            self._eq = None

        if problem.extra_cost is not None:
            def _extra(zs, pb):
                return problem.extra_cost(zs * s, pb)
            self._extra = jax.jit(_extra)
            self._gextra = jax.jit(jax.grad(_extra))
            self._hextra = jax.jit(jax.jacfwd(jax.grad(_extra)))
        else:
            self._extra = None

        self.lb_s = scale_clip(problem.lb, scale)
        self.ub_s = scale_clip(problem.ub, scale)

        w_j = jnp.asarray(self.w)
        n = problem.n

        # all per-iterate quantities fused into single compiled functions:
        # one dispatch per SQP iteration / line-search trial instead of one
        # per derivative, with the Gauss-Newton products formed on-device
        def _point(zs, pb):
            r = _res(zs, pb)
            Jr = jax.jacfwd(_res)(zs, pb)
            f = jnp.dot(w_j, r * r)
            g = 2.0 * Jr.T @ (w_j * r)
            Hh = 2.0 * (Jr.T * w_j) @ Jr
            if problem.extra_cost is not None:
                f = f + _extra(zs, pb)
                g = g + jax.grad(_extra)(zs, pb)
                Hh = Hh + jax.jacfwd(jax.grad(_extra))(zs, pb)
            if problem.equalities is not None:
                c = _eq(zs, pb)
                if problem.equalities_jac is not None:
                    # chain rule for the variable scaling: columns pick up s
                    A = problem.equalities_jac(zs * s, pb) * s[None, :]
                else:
                    A = jax.jacfwd(_eq)(zs, pb)
            else:
                c = jnp.zeros(0)
                A = jnp.zeros((0, n))
            return f, Hh, g, c, A

        def _merit_parts(zs, pb):
            r = _res(zs, pb)
            f = jnp.dot(w_j, r * r)
            if problem.extra_cost is not None:
                f = f + _extra(zs, pb)
            csum = (jnp.sum(jnp.abs(_eq(zs, pb)))
                    if problem.equalities is not None else 0.0)
            return f, csum

        self._point = jax.jit(_point)
        self._merit_parts = jax.jit(_merit_parts)

    # -- evaluation helpers (scaled domain) -------------------------------

    def _cost(self, zs, pb):
        r = np.asarray(self._res(zs, pb))
        f = float(np.dot(self.w, r * r))
        if self._extra is not None:
            f += float(self._extra(zs, pb))
        return f

    def _cviol(self, zs, pb):
        if self._eq is None:
            return 0.0, np.zeros(0)
        c = np.asarray(self._eq(zs, pb))
        return float(np.sum(np.abs(c))), c

    def _project(self, zs):
        return np.clip(zs, self.lb_s, self.ub_s)

    def _merit(self, zs, pb, nu):
        f, csum = self._merit_parts(zs, pb)
        return float(f) + nu * float(csum)

    def _derivs(self, zs, pb):
        """Cost, Hessian model, gradient, constraints and constraint
        Jacobian at one point (one fused evaluation per iterate)."""
        f, H, g, c, A = self._point(zs, pb)
        return (float(f), np.asarray(H), np.asarray(g), np.asarray(c),
                np.asarray(A))

    # -- main solve -------------------------------------------------------

    def solve(self, z0: np.ndarray, pb=None, callback=None) -> NlpResult:
        t_start = time.perf_counter()
        zs = self._project(np.asarray(z0, dtype=float) / self.scale)

        f0 = self._cost(zs, pb)
        c1, c_vec = self._cviol(zs, pb)
        if not np.isfinite(f0) or not np.isfinite(c1):
            raise GuessInvalidError("initial guess gives non-finite cost or constraints")

        f_now, H_gn, g, c, A = self._derivs(zs, pb)
        nu = 1.0
        reg = 1e-8
        tr = 1.0  # componentwise trust radius, scaled units
        lam = np.zeros(c_vec.size)
        dz_prev = None
        merit_drops = []
        kkt = np.inf
        converged = False
        it = 0

        while it < self.max_iter:
            it += 1
            # regularize just enough that the QP is convex (the smooth extra
            # cost can contribute slightly indefinite curvature)
            reg = _correct_inertia(H_gn, reg)
            if reg is None:
                break
            H = H_gn + reg * np.eye(self.problem.n)

            # the trust radius enters the QP as tightened box bounds, so even
            # clamped (active-bound) components cannot take steps larger than
            # the region where the linearized dynamics are trustworthy
            lb_t = np.maximum(self.lb_s, zs - tr)
            ub_t = np.minimum(self.ub_s, zs + tr)
            dz, lam_qp = _qp_step(H, A, g, c, lb_t, ub_t, zs)
            bump = reg
            while _qp_bad(dz, lam_qp) and bump < 1e12:
                # singular or wildly ill-conditioned KKT system: stiffen
                bump = max(bump * 100.0, 1e-6)
                dz, lam_qp = _qp_step(H + bump * np.eye(self.problem.n),
                                      A, g, c, lb_t, ub_t, zs)
            if _qp_bad(dz, lam_qp):
                break  # KKT system unsolvable even fully regularized

            # exact-penalty weight follows the current multiplier estimate;
            # letting it decay again stops one early ill-conditioned QP from
            # poisoning every later line search
            lam_inf = float(np.max(np.abs(lam_qp), initial=0.0))
            nu_want = 2.0 * lam_inf + 1e-3
            nu = nu_want if nu_want > nu else max(nu_want, 0.3 * nu)
            csum = float(np.sum(np.abs(c)))
            phi0 = f_now + nu * csum
            descent = float(g @ dz) - nu * csum

            def _accepts(cand, alpha):
                phi = self._merit(cand, pb, nu)
                ok = np.isfinite(phi) and (
                    phi <= phi0 + 1e-4 * alpha * min(descent, 0.0)
                    or phi < phi0 - 1e-14 * abs(phi0))
                return ok, phi

            # when the proposal nearly reverses the last accepted step the
            # quadratic model is overshooting across the solution; relax the
            # first trial Aitken-style (treating successive steps as a linear
            # contraction, rho estimated by the Rayleigh quotient) so the
            # ping-pong mode is cancelled rather than merely slowed
            alpha0 = 1.0
            if dz_prev is not None:
                nn = np.linalg.norm(dz) * np.linalg.norm(dz_prev)
                if nn > 0.0 and float(dz @ dz_prev) < -0.5 * nn:
                    rho = float(dz @ dz_prev) / float(dz_prev @ dz_prev)
                    alpha0 = min(max(1.0 / (1.0 - rho), 0.25), 1.0)

            alpha = alpha0
            zs_new = None
            while alpha > 1e-10:
                cand = self._project(zs + alpha * dz)
                ok, phi = _accepts(cand, alpha)
                if ok:
                    zs_new = cand
                    break
                if alpha == alpha0 and c.size:
                    # second-order correction: retry the full step with the
                    # newly induced constraint violation pulled back out, so
                    # constraint curvature alone cannot veto a good step
                    c_trial = np.asarray(self._eq(cand, pb))
                    if np.all(np.isfinite(c_trial)):
                        try:
                            w_soc = np.linalg.solve(
                                A @ A.T + 1e-10 * np.eye(c.size), c_trial)
                        except np.linalg.LinAlgError:
                            w_soc = None
                        if w_soc is not None:
                            cand2 = self._project(zs + alpha * dz - A.T @ w_soc)
                            ok2, phi2 = _accepts(cand2, alpha)
                            if ok2:
                                zs_new = cand2
                                phi = phi2
                                break
                alpha *= 0.5
            if zs_new is None:
                # no acceptable step; shrink the trust region, stiffen the
                # model and try again
                tr = max(tr / 4.0, 1e-3)
                reg = max(reg * 10.0, 1e-4)
                if reg > 1e8:
                    break
                continue
            zs = zs_new
            lam = lam_qp
            dz_prev = alpha * dz
            merit_drops.append((phi0, phi, nu))

            # Levenberg-style damping: heavily cut steps mean the quadratic
            # model over-reaches (e.g. one-sided penalties invisible while
            # inactive), so shrink the next proposal; full steps relax it
            if alpha < 0.25 * alpha0:
                tr = max(tr / 2.0, 1e-3)
                reg = min(max(reg * 10.0, 1e-2), 1e6)
            elif alpha == alpha0:
                tr = min(tr * 2.0, 4.0)
                reg = max(reg / 10.0, 1e-8)
            elif alpha >= 0.5 * alpha0:
                reg = max(reg / 3.0, 1e-8)

            # projected-gradient KKT residual at the new iterate; the
            # derivatives carry over as the next iteration's linearization
            f_now, H_gn, g, c, A = self._derivs(zs, pb)
            if c.size:
                gl = g + A.T @ lam
                feas = float(np.max(np.abs(c), initial=0.0))
            else:
                gl = g
                feas = 0.0
            stat = float(np.max(np.abs(self._project(zs - gl) - zs), initial=0.0))
            stat = stat / (1.0 + float(np.max(np.abs(g), initial=0.0)))
            # near-singular curvature can keep the projected gradient above
            # tolerance while the QP step is already negligible; a vanishing
            # full step at feasibility is equally valid stationarity evidence
            dz_inf = float(alpha * np.max(np.abs(dz), initial=0.0))
            step_norm = (dz_inf if alpha == alpha0 and reg <= 1e-2
                         and dz_inf < 0.9 * tr else np.inf)
            kkt = max(min(stat, step_norm), feas)
            if callback is not None:
                callback({"it": it, "alpha": alpha, "reg": reg, "nu": nu,
                          "tr": tr, "feas": feas, "stat": stat, "kkt": kkt,
                          "dz_inf": dz_inf, "lam_inf": lam_inf,
                          "cost": f_now})
            if kkt <= self.tol:
                converged = True
                break

        cviol, _ = self._cviol(zs, pb)
        return NlpResult(
            z=zs * self.scale,
            multipliers=lam,
            kkt_residual=float(kkt),
            iterations=it,
            converged=converged,
            solve_time=time.perf_counter() - t_start,
            cost=self._cost(zs, pb),
            constraint_violation=cviol,
            merit_drops=merit_drops,
        )


def _correct_inertia(H, reg):
    """Smallest shift (starting at reg) making H + reg*I positive definite;
    None if no reasonable shift works."""
    eye = np.eye(H.shape[0])
    reg = max(reg, 1e-8)
    while reg <= 1e10:
        try:
            np.linalg.cholesky(H + reg * eye)
            return reg
        except np.linalg.LinAlgError:
            reg *= 10.0
    return None


def _qp_bad(dz, lam):
    """True if the QP step is unusable (failed solve or garbage multipliers)."""
    if dz is None:
        return True
    return float(np.max(np.abs(lam), initial=0.0)) > 1e8


def _qp_step(H, A, g, c, lb, ub, z):
    """Box- and equality-constrained QP step:

        min 1/2 dz' H dz + g' dz   s.t.  A dz = -c,  lb <= z + dz <= ub

    Solved with the Clarabel interior-point solver, which stays fast on the
    ill-conditioned subproblems where first-order methods stall.  Returns the
    step and the equality multipliers, or (None, None) when the QP cannot be
    solved.
    """
    n = H.shape[0]
    m = A.shape[0]
    fin_u = np.isfinite(ub)
    fin_l = np.isfinite(lb)
    n_box = int(fin_u.sum() + fin_l.sum())
    if m == 0 and n_box == 0:
        try:
            return -np.linalg.solve(H, g), np.zeros(0)
        except np.linalg.LinAlgError:
            return None, None
    P = sp.csc_matrix(np.triu(H))
    eye = sp.identity(n, format="csr")
    Ac = sp.vstack([sp.csc_matrix(A), eye[fin_u], -eye[fin_l]],
                   format="csc")
    b = np.concatenate([-c, (ub - z)[fin_u], (z - lb)[fin_l]])
    cones = []
    if m:
        cones.append(clarabel.ZeroConeT(m))
    if n_box:
        cones.append(clarabel.NonnegativeConeT(n_box))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    # static regularization alone keeps the KKT solves accurate enough here
    # (~1e-11 against refined solves) at a sizeable per-QP saving
    settings.iterative_refinement_enable = False
    try:
        sol = clarabel.DefaultSolver(P, g, Ac, b, cones, settings).solve()
    except Exception:
        return None, None
    if str(sol.status) not in ("Solved", "AlmostSolved"):
        return None, None
    dz = np.asarray(sol.x, dtype=float)
    lam = np.asarray(sol.z, dtype=float)[:m]
    if not (np.all(np.isfinite(dz)) and np.all(np.isfinite(lam))):
        return None, None
    # keep the step strictly inside the box despite solver tolerances
    return np.clip(z + dz, lb, ub) - z, lam


def scale_clip(bound, scale):
    """Scale finite bounds; leave infinities in place."""
    b = np.asarray(bound, dtype=float).copy()
    finite = np.isfinite(b)
    b[finite] = b[finite] / scale[finite]
    return b
