"""Predictive controller: builds and solves the online trajectory problem
each control cycle.

The horizon is laid out over path distance (20 intervals: 5 short steps for
near-field resolution, then 15 long ones, 120 m total).  The decision vector
stacks the 11-element states at nodes 1..N and the 4 rate inputs on each
interval; the initial state is eliminated (it enters as a parameter).  All
tracking and penalty terms are weighted least-squares residuals so the
solver's Gauss-Newton model is exact; the elapsed-time term is the one
non-quadratic cost and goes through the solver's extra-cost channel with an
exact Hessian.

Parameter bundles (reference/topology samples, friction estimates, the
initial state) are passed separately from the decision vector, so the jitted
derivative functions compile once per controller instance and every
subsequent solve reuses them.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import fsolve
import jax
import jax.numpy as jnp

from .chassis import yaw_moment_from_split
from .dynamics import (IBETA, IDELTA, IDFZ, IDPHI, IE, IOMEGA, IR, ITAU,
                       ITAUBF, ITAUBR, IV, NU, NX, TopologyPoint, VehicleState,
                       axle_forces, path_rate, slip_quantities,
                       state_derivative, spatial_derivative)
from .errors import GuessInvalidError
from .ocp import NlpProblem, NlpResult, SqpSolver, implicit_midpoint_defect
from .params import SDOT_FLOOR, VehicleParams

DS_SCHEDULE_DEFAULT = (3.0,) * 5 + (7.0,) * 15


@dataclass(frozen=True)
class NmpcConfig:
    """Horizon layout, cost weights, and solver settings."""

    ds_schedule: tuple = DS_SCHEDULE_DEFAULT
    t_lookahead: float = 0.05       # [s] expected solve latency
    mu_lim: float = 0.95            # friction-circle fraction cap
    beta_min: float = -0.15         # sideslip soft bounds [rad]
    beta_max: float = 0.15

    # cost weights (tunables; magnitudes documented in config files)
    w_tb: float = 200.0             # track-bound violation [1/m^2]
    w_beta: float = 2000.0          # sideslip violation
    w_e: float = 0.3                # lateral error tracking
    w_t: float = 1.0                # elapsed time
    w_alpha: float = 10.0           # front slip-angle regularization
    w_V: float = 0.3                # speed reference tracking
    w_tau_bf: float = 2e-8          # brake torque reference tracking
    w_tau_br: float = 2e-8
    w_F: float = 2000.0             # friction-circle exceedance
    w_ddelta: float = 2.0           # steering acceleration
    w_ddtau: float = 1e-7           # engine torque acceleration
    w_dtau: float = 1e-9            # brake torque-rate reference tracking
    w_ord: float = 1e-3             # brake ordering (front >= rear magnitude)
    w_bdot: float = 50.0            # terminal sideslip stability
    w_edot: float = 5.0             # terminal error stability
    k_bdot: float = 1.0
    k_edot: float = 1.0

    kkt_tol: float = 1e-6
    max_iter: int = 50

    def validate(self) -> None:
        from .errors import ValidationError

        if abs(sum(self.ds_schedule) - 120.0) > 1e-9:
            raise ValidationError("horizon must span 120 m")
        if not 0.0 < self.mu_lim <= 1.0:
            raise ValidationError("mu_lim must be in (0, 1]")
        for name in ("w_tb", "w_beta", "w_e", "w_t", "w_alpha", "w_V",
                     "w_tau_bf", "w_tau_br", "w_F", "w_ddelta", "w_ddtau",
                     "w_dtau", "w_ord", "w_bdot", "w_edot"):
            if getattr(self, name) < 0.0:
                raise ValidationError(f"{name} must be >= 0")


@dataclass
class OcpSolution:
    """One converged (or best-iterate) horizon solution."""

    s_nodes: np.ndarray             # (N+1,) path distances of the nodes
    states: np.ndarray              # (N+1, 11) including the fixed x0
    inputs: np.ndarray              # (N, 4) rate inputs per interval
    kkt_residual: float
    iterations: int
    converged: bool
    solve_time: float
    cost: float
    constraint_violation: float


@dataclass
class ControllerCommand:
    delta: float
    tau: float
    tau_bf: float
    tau_br: float
    valid_s_range: tuple
    clamped: bool = False


@dataclass
class StepTelemetry:
    s0: float
    solve_time: float
    iterations: int
    converged: bool
    kkt_residual: float
    warm_started: bool
    bootstrap: bool
    degraded: bool = False


_ACT_IDX = (IDELTA, ITAU, ITAUBF, ITAUBR)


def _state_bounds(p: VehicleParams):
    lim = p.limits
    lb = np.full(NX, -np.inf)
    ub = np.full(NX, np.inf)
    lb[IV] = 1.0
    lb[IOMEGA], ub[IOMEGA] = lim.omega_r_min, lim.omega_r_max
    lb[IDELTA], ub[IDELTA] = lim.delta_min, lim.delta_max
    lb[ITAU], ub[ITAU] = lim.tau_min, lim.tau_max
    lb[ITAUBF], ub[ITAUBF] = lim.tau_bf_min, 0.0
    lb[ITAUBR], ub[ITAUBR] = lim.tau_br_min, 0.0
    return lb, ub


def _input_bounds(p: VehicleParams):
    lim = p.limits
    lb = np.array([lim.ddelta_min, lim.dtau_min, lim.dtau_b_min, lim.dtau_b_min])
    ub = np.array([lim.ddelta_max, lim.dtau_max, lim.dtau_b_max, lim.dtau_b_max])
    return lb, ub


_STATE_SCALE = np.array([1.0, 40.0, 0.2, 5.0, 2.0, 0.2, 2000.0,
                         0.5, 500.0, 6000.0, 4000.0])
_INPUT_SCALE = np.array([0.7, 4000.0, 30000.0, 30000.0])


class NmpcController:
    """Receding-horizon controller over a track map.

    Builds the NLP structure once; per-cycle data (initial state, reference
    and topology samples, friction estimates) flow through the parameter
    bundle so compiled solver derivatives are reused across cycles.
    """

    def __init__(self, config: NmpcConfig, p: VehicleParams):
        config.validate()
        self.config = config
        self.p = p
        self.N = len(config.ds_schedule)
        self.ds = np.asarray(config.ds_schedule, dtype=float)
        self.s_offsets = np.concatenate([[0.0], np.cumsum(self.ds)])
        self.n = self.N * NX + self.N * NU
        self._solver = self._build_solver()

    # -- problem construction ---------------------------------------------

    def _build_solver(self) -> SqpSolver:
        cfg = self.config
        p = self.p
        N = self.N
        ds = jnp.asarray(self.ds)

        def unpack(z, pb):
            xs = jnp.concatenate([pb["x0"][None, :], z[:N * NX].reshape(N, NX)])
            us = z[N * NX:].reshape(N, NU)
            return xs, us

        def node_quantities(x, kappa, theta, psi, dtheta_ds, mu_f, mu_r):
            topo = TopologyPoint(kappa=kappa, theta=theta, psi=psi,
                                 dtheta_ds=dtheta_ds)
            sdot = jnp.maximum(path_rate(x, kappa, xp=jnp), SDOT_FLOOR)
            Fxf, Fyf, Fxr, Fyr, Fzf, Fzr, _, _ = axle_forces(
                x, topo, sdot, p, mu_f=mu_f, mu_r=mu_r, xp=jnp, strict=False)
            util_f = (Fxf**2 + Fyf**2) / (mu_f * Fzf)**2
            util_r = (Fxr**2 + Fyr**2) / (mu_r * Fzr)**2
            alpha_f, _, _ = slip_quantities(x, p, xp=jnp)
            return sdot, util_f, util_r, alpha_f

        v_node = jax.vmap(node_quantities, in_axes=(0, 0, 0, 0, 0, None, None))

        def residuals(z, pb):
            xs, us = unpack(z, pb)
            xn = xs[1:]                                   # nodes 1..N
            sdot, util_f, util_r, alpha_f = v_node(
                xn, pb["kappa"], pb["theta"], pb["psi"], pb["dtheta_ds"],
                pb["mu_f"], pb["mu_r"])

            e = xn[:, IE]
            beta = xn[:, IBETA]
            # softplus-smoothed hinge: keeps the one-sided penalties C^2 so
            # the Gauss-Newton model sees them slightly before activation
            # (d is the transition band in the residual's own units)
            hinge = lambda v, d: d * jnp.logaddexp(0.0, v / d)

            parts = [
                hinge(e - pb["e_max"], 0.02),             # track bounds
                hinge(pb["e_min"] - e, 0.02),
                hinge(beta - cfg.beta_max, 0.005),        # sideslip bounds
                hinge(cfg.beta_min - beta, 0.005),
                e,                                        # lateral tracking
                alpha_f,                                  # slip regularization
                xn[:, IV] - pb["V_ref"],                  # speed tracking
                xn[:, ITAUBF] - pb["tau_bf_ref"],         # brake tracking
                xn[:, ITAUBR] - pb["tau_br_ref"],
                hinge(util_f - cfg.mu_lim**2, 0.01),      # friction circle
                hinge(util_r - cfg.mu_lim**2, 0.01),
                hinge(xn[:, ITAUBF] - xn[:, ITAUBR], 20.0),  # brake ordering
                us[:, 2] - pb["dtau_bf_ref"],             # rate reference
                us[:, 3] - pb["dtau_br_ref"],
            ]
            # input accelerations: rate differences over the local time step
            dt_inner = ds[1:] / sdot[:-1]
            parts.append(jnp.diff(us[:, 0]) / dt_inner)   # steering accel
            parts.append(jnp.diff(us[:, 1]) / dt_inner)   # engine accel

            # terminal first-order stability on sideslip and lateral error
            topo_N = TopologyPoint(kappa=pb["kappa"][-1], theta=pb["theta"][-1],
                                   psi=pb["psi"][-1], dtheta_ds=pb["dtheta_ds"][-1])
            tau_bb_N = yaw_moment_from_split(
                xn[-1, ITAUBF], xn[-1, ITAUBR], pb["a_y_ref"][-1],
                xn[-1, IDELTA], p, xp=jnp)
            dxdt_N = state_derivative(xn[-1], us[-1], topo_N, tau_bb_N, p,
                                      mu_f=pb["mu_f"], mu_r=pb["mu_r"],
                                      drive_ratio=pb["drive_ratio"],
                                      xp=jnp, strict=False)
            parts.append(jnp.stack([dxdt_N[IBETA] + cfg.k_bdot * beta[-1]]))
            parts.append(jnp.stack([dxdt_N[IE] + cfg.k_edot * e[-1]]))
            return jnp.concatenate(parts)

        wn = self.ds  # per-node ds weighting (node i <- interval ending at i)
        weights = np.concatenate([
            cfg.w_tb * wn, cfg.w_tb * wn,
            cfg.w_beta * wn, cfg.w_beta * wn,
            cfg.w_e * wn,
            cfg.w_alpha * wn,
            cfg.w_V * wn,
            cfg.w_tau_bf * wn, cfg.w_tau_br * wn,
            cfg.w_F * wn, cfg.w_F * wn,
            cfg.w_ord * wn,
            cfg.w_dtau * self.ds, cfg.w_dtau * self.ds,
            cfg.w_ddelta * self.ds[1:], cfg.w_ddtau * self.ds[1:],
            [cfg.w_bdot * self.ds[-1]], [cfg.w_edot * self.ds[-1]],
        ])

        def extra_cost(z, pb):
            xs, _ = unpack(z, pb)
            sdot = jax.vmap(lambda x, k: jnp.maximum(path_rate(x, k, xp=jnp),
                                                     SDOT_FLOOR))(
                xs[1:], pb["kappa"])
            return cfg.w_t * jnp.sum(ds / sdot)

        def dyn_mid(x_mid, u, kappa, theta, psi, dtheta_ds, a_y, mu_f, mu_r,
                    drive_ratio):
            topo = TopologyPoint(kappa=kappa, theta=theta, psi=psi,
                                 dtheta_ds=dtheta_ds)
            tau_bb = yaw_moment_from_split(x_mid[ITAUBF], x_mid[ITAUBR], a_y,
                                           x_mid[IDELTA], p, xp=jnp)
            return spatial_derivative(x_mid, u, topo, tau_bb, p, mu_f=mu_f,
                                      mu_r=mu_r, drive_ratio=drive_ratio,
                                      xp=jnp, strict=False)

        def one_defect(x_k, x_kp1, u_k, ds_k, kappa, theta, psi, dtheta_ds,
                       a_y, mu_f, mu_r, drive_ratio):
            f = lambda xm, uu: dyn_mid(xm, uu, kappa, theta, psi, dtheta_ds,
                                       a_y, mu_f, mu_r, drive_ratio)
            return implicit_midpoint_defect(x_k, x_kp1, u_k, ds_k, f)

        v_defect = jax.vmap(one_defect,
                            in_axes=(0, 0, 0, 0, 0, 0, 0, 0, 0, None, None, None))

        c_scale = jnp.asarray(_STATE_SCALE)

        def equalities(z, pb):
            xs, us = unpack(z, pb)
            d = v_defect(xs[:-1], xs[1:], us, ds,
                         pb["kappa_mid"], pb["theta_mid"], pb["psi_mid"],
                         pb["dtheta_ds_mid"], pb["a_y_mid"],
                         pb["mu_f"], pb["mu_r"], pb["drive_ratio"])
            # defects normalized per channel so no single physical unit
            # dominates the merit function or the multiplier estimates
            return (d / c_scale[None, :]).reshape(-1)

        # constraint Jacobian assembled from per-interval blocks: each defect
        # touches only (x_k, x_{k+1}, u_k), so differentiating intervals
        # independently needs NX+NX+NU tangents instead of one per variable
        d_blocks = jax.vmap(jax.jacfwd(one_defect, argnums=(0, 1, 2)),
                            in_axes=(0, 0, 0, 0, 0, 0, 0, 0, 0,
                                     None, None, None))

        def equalities_jac(z, pb):
            xs, us = unpack(z, pb)
            Jx0, Jx1, Ju = d_blocks(xs[:-1], xs[1:], us, ds,
                                    pb["kappa_mid"], pb["theta_mid"],
                                    pb["psi_mid"], pb["dtheta_ds_mid"],
                                    pb["a_y_mid"], pb["mu_f"], pb["mu_r"],
                                    pb["drive_ratio"])
            Jx0 = Jx0 / c_scale[None, :, None]
            Jx1 = Jx1 / c_scale[None, :, None]
            Ju = Ju / c_scale[None, :, None]
            ar = jnp.arange(N)
            As = jnp.zeros((N, NX, N, NX))
            # defect k sees node k+1 in z block k and node k in z block k-1
            # (the k=0 defect's left state is the fixed initial condition)
            As = As.at[ar, :, ar, :].set(Jx1)
            As = As.at[ar[1:], :, ar[1:] - 1, :].set(Jx0[1:])
            Au = jnp.zeros((N, NX, N, NU)).at[ar, :, ar, :].set(Ju)
            return jnp.concatenate([As.reshape(N * NX, N * NX),
                                    Au.reshape(N * NX, N * NU)], axis=1)

        slb, sub = _state_bounds(self.p)
        ilb, iub = _input_bounds(self.p)
        lb = np.concatenate([np.tile(slb, self.N), np.tile(ilb, self.N)])
        ub = np.concatenate([np.tile(sub, self.N), np.tile(iub, self.N)])
        z_scale = np.concatenate([np.tile(_STATE_SCALE, self.N),
                                  np.tile(_INPUT_SCALE, self.N)])

        problem = NlpProblem(n=self.n, residuals=residuals, weights=weights,
                             lb=lb, ub=ub, equalities=equalities,
                             extra_cost=extra_cost, z_scale=z_scale,
                             equalities_jac=equalities_jac)
        return SqpSolver(problem, tol=cfg.kkt_tol, max_iter=cfg.max_iter)

    # -- per-cycle data ----------------------------------------------------

    def parameter_bundle(self, x0: np.ndarray, s0: float, track,
                         mu_f: float, mu_r: float, drive_ratio: float) -> dict:
        """Reference/topology samples over the horizon as solver parameters."""
        s_nodes = s0 + self.s_offsets
        s_mid = 0.5 * (s_nodes[:-1] + s_nodes[1:])
        topo = track.query_topology(s_nodes[1:])
        topo_mid = track.query_topology(s_mid)
        ref = track.query_reference(s_nodes[1:])
        ref_mid = track.query_reference(s_mid)
        ref_u = track.query_reference(s_nodes[:-1])
        pb = {
            "x0": x0,
            "kappa": topo["kappa_ref"], "theta": topo["theta"],
            "psi": topo["psi"], "dtheta_ds": topo["dtheta_ds"],
            "e_min": topo["e_min"], "e_max": topo["e_max"],
            "V_ref": np.sqrt(self.config.mu_lim) * ref["V_ref"],
            "tau_bf_ref": ref["tau_bf_ref"], "tau_br_ref": ref["tau_br_ref"],
            "a_y_ref": ref["a_y_ref"],
            "dtau_bf_ref": ref_u["dtau_bf_ref"],
            "dtau_br_ref": ref_u["dtau_br_ref"],
            "kappa_mid": topo_mid["kappa_ref"], "theta_mid": topo_mid["theta"],
            "psi_mid": topo_mid["psi"], "dtheta_ds_mid": topo_mid["dtheta_ds"],
            "a_y_mid": ref_mid["a_y_ref"],
            "mu_f": float(mu_f), "mu_r": float(mu_r),
            "drive_ratio": float(drive_ratio),
        }
        return {k: (jnp.asarray(v) if isinstance(v, np.ndarray) else v)
                for k, v in pb.items()}

    def reference_guess(self, s0: float, track, x0: np.ndarray,
                        mu_f: float | None = None, mu_r: float | None = None,
                        drive_ratio: float | None = None) -> np.ndarray:
        """Initial decision vector built from the reference trajectory."""
        mu_f = self.p.mu_f if mu_f is None else mu_f
        mu_r = self.p.mu_r if mu_r is None else mu_r
        if drive_ratio is None:
            drive_ratio = self.p.drivetrain.ratios[-1]
        s_nodes = s0 + self.s_offsets
        topo = track.query_topology(s_nodes[1:])
        ref = track.query_reference(s_nodes[1:])
        scale = np.sqrt(self.config.mu_lim)
        N = self.N
        xs = np.zeros((N, NX))
        xs[:, IV] = scale * ref["V_ref"]
        xs[:, IR] = scale * ref["r_ref"]
        xs[:, IOMEGA] = xs[:, IV] / self.p.r_w
        xs[:, IDELTA] = np.clip(np.arctan(self.p.L * topo["kappa_ref"]),
                                self.p.limits.delta_min, self.p.limits.delta_max)
        xs[:, ITAUBF] = ref["tau_bf_ref"]
        xs[:, ITAUBR] = ref["tau_br_ref"]

        acts = np.vstack([x0[list(_ACT_IDX)],
                          xs[:, list(_ACT_IDX)]])          # (N+1, 4)
        sdot_ref = np.maximum(scale * track.query_reference(s_nodes[:-1])["V_ref"],
                              SDOT_FLOOR)
        dt = self.ds / sdot_ref
        ilb, iub = _input_bounds(self.p)
        us = np.clip(np.diff(acts, axis=0) / dt[:, None], ilb, iub)

        # roll the model out with those rates using the same implicit-midpoint
        # steps as the collocation defects, so the guess starts feasible; fall
        # back to the pure reference states if a step fails to solve or the
        # rollout leaves its sane envelope
        s_mid = 0.5 * (s_nodes[:-1] + s_nodes[1:])
        topo_mid = track.query_topology(s_mid)
        a_y_mid = track.query_reference(s_mid)["a_y_ref"]
        x = x0.copy()
        lim = self.p.limits
        for k in range(N):
            topo = TopologyPoint(kappa=float(topo_mid["kappa_ref"][k]),
                                 theta=float(topo_mid["theta"][k]),
                                 psi=float(topo_mid["psi"][k]),
                                 dtheta_ds=float(topo_mid["dtheta_ds"][k]))
            a_y = float(a_y_mid[k])

            # feedback throttle toward the reference speed profile, so the
            # guess already carries a sensible acceleration plan instead of
            # leaving the whole torque trajectory to the optimizer
            v_now = max(float(x[IV]), SDOT_FLOOR)
            a_des = (xs[k, IV] ** 2 - v_now ** 2) / (2.0 * self.ds[k])
            tau_des = np.clip(self.p.m * a_des * self.p.r_w / drive_ratio,
                              lim.tau_min, lim.tau_max)
            dt_k = self.ds[k] / v_now
            us[k, 1] = np.clip((tau_des - float(x[ITAU])) / dt_k,
                               lim.dtau_min, lim.dtau_max)

            def f(xm):
                tau_bb = float(yaw_moment_from_split(
                    xm[ITAUBF], xm[ITAUBR], a_y, xm[IDELTA], self.p))
                return np.asarray(spatial_derivative(
                    xm, us[k], topo, tau_bb, self.p, mu_f=mu_f, mu_r=mu_r,
                    drive_ratio=drive_ratio, strict=False))

            g = lambda x1: x1 - x - self.ds[k] * f(0.5 * (x + x1))
            x1, _, ier, _ = fsolve(g, x, xtol=1e-12, full_output=True)
            if ier != 1 or not np.all(np.isfinite(x1)) or abs(x1[IBETA]) > 0.5:
                break
            x = x1
            xs[k] = x
        return np.concatenate([xs.reshape(-1), us.reshape(-1)])

    # -- lookahead ---------------------------------------------------------

    def build_lookahead_state(self, measured: VehicleState, s_now: float,
                              prev: OcpSolution | None, track,
                              drive_ratio: float,
                              mu_f: float | None = None,
                              mu_r: float | None = None) -> tuple[np.ndarray, float, bool]:
        """Predicted state at s(t + t_lookahead); returns (x, s, bootstrap).

        Actuator states, dFz, and wheelspeed roll forward from the previous
        solution using its input rates; measured channels integrate the
        vehicle model over the lookahead window with those rollouts.
        """
        t_la = self.config.t_lookahead
        m = measured.as_array()
        bootstrap = prev is None or not (
            prev.s_nodes[0] - 10.0 <= s_now <= prev.s_nodes[-1])

        if bootstrap:
            x = m.copy()
            rates = np.zeros(NU)
        else:
            x = m.copy()
            for idx in (*_ACT_IDX, IDFZ, IOMEGA):
                x[idx] = _interp_channel(prev, s_now, idx)
            rates = _interp_rates(prev, s_now)

        if t_la <= 0.0:
            return x, float(s_now), bootstrap

        topo_d = track.query_topology(s_now)
        topo = TopologyPoint(kappa=float(topo_d["kappa_ref"]),
                             theta=float(topo_d["theta"]),
                             psi=float(topo_d["psi"]),
                             dtheta_ds=float(topo_d["dtheta_ds"]))
        ref = track.query_reference(s_now)
        tau_bb = float(yaw_moment_from_split(x[ITAUBF], x[ITAUBR],
                                             float(ref["a_y_ref"]),
                                             x[IDELTA], self.p))

        def f(xv):
            return state_derivative(xv, rates, topo, tau_bb, self.p,
                                    mu_f=mu_f, mu_r=mu_r,
                                    drive_ratio=drive_ratio, strict=False)

        nsub = 25
        h = t_la / nsub
        s = float(s_now)
        for _ in range(nsub):
            s += h * max(float(path_rate(x, topo.kappa)), SDOT_FLOOR)
            k1 = f(x)
            k2 = f(x + 0.5 * h * k1)
            k3 = f(x + 0.5 * h * k2)
            k4 = f(x + h * k3)
            x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)

        slb, sub_ = _state_bounds(self.p)
        x = np.clip(x, slb, sub_)
        return x, s, bootstrap

    # -- control cycle -----------------------------------------------------

    def control_step(self, measured: VehicleState, s_now: float, track,
                     mu_estimate: tuple[float, float],
                     prev: OcpSolution | None = None,
                     drive_ratio: float | None = None
                     ) -> tuple[OcpSolution | None, StepTelemetry]:
        if drive_ratio is None:
            drive_ratio = self.p.drivetrain.ratios[-1]
        mu_f, mu_r = mu_estimate
        x0, s0, bootstrap = self.build_lookahead_state(
            measured, s_now, prev, track, drive_ratio, mu_f=mu_f, mu_r=mu_r)
        pb = self.parameter_bundle(x0, s0, track, mu_f, mu_r, drive_ratio)

        warm = prev is not None and not bootstrap
        guesses = []
        if warm:
            guesses.append(lambda: np.concatenate(
                [prev.states[1:].reshape(-1), prev.inputs.reshape(-1)]))
        # the rollout guess is built lazily: it costs a sizeable fraction of
        # a warm solve and is only needed when no previous solution applies
        guesses.append(lambda: self.reference_guess(
            s0, track, x0, mu_f=mu_f, mu_r=mu_r, drive_ratio=drive_ratio))

        result = None
        for gi, make_z0 in enumerate(guesses):
            try:
                result = self._solver.solve(make_z0(), pb)
                warm = warm and gi == 0
                break
            except GuessInvalidError:
                continue
        if result is None:
            tel = StepTelemetry(s0=s0, solve_time=0.0, iterations=0,
                                converged=False, kkt_residual=np.inf,
                                warm_started=False, bootstrap=bootstrap,
                                degraded=True)
            return None, tel

        sol = self._wrap_solution(result, x0, s0)
        tel = StepTelemetry(s0=s0, solve_time=result.solve_time,
                            iterations=result.iterations,
                            converged=result.converged,
                            kkt_residual=result.kkt_residual,
                            warm_started=warm, bootstrap=bootstrap)
        return sol, tel

    def _wrap_solution(self, result: NlpResult, x0: np.ndarray,
                       s0: float) -> OcpSolution:
        N = self.N
        states = np.vstack([x0[None, :], result.z[:N * NX].reshape(N, NX)])
        inputs = result.z[N * NX:].reshape(N, NU)
        return OcpSolution(s_nodes=s0 + self.s_offsets, states=states,
                           inputs=inputs, kkt_residual=result.kkt_residual,
                           iterations=result.iterations,
                           converged=result.converged,
                           solve_time=result.solve_time, cost=result.cost,
                           constraint_violation=result.constraint_violation)


def _interp_channel(sol: OcpSolution, s: float, idx: int) -> float:
    return float(np.interp(s, sol.s_nodes, sol.states[:, idx]))


def _interp_rates(sol: OcpSolution, s: float) -> np.ndarray:
    k = int(np.clip(np.searchsorted(sol.s_nodes, s, side="right") - 1,
                    0, sol.inputs.shape[0] - 1))
    return sol.inputs[k].copy()


def interpolate_command(sol: OcpSolution, s_now: float) -> ControllerCommand:
    """Actuator command at path distance s by linear interpolation of the
    solution's actuator-state channels; clamps (and flags) outside the span."""
    from .errors import CommandError

    if sol is None or sol.states.size == 0:
        raise CommandError("no solution to interpolate")
    lo, hi = float(sol.s_nodes[0]), float(sol.s_nodes[-1])
    clamped = not (lo <= s_now <= hi)
    s = float(np.clip(s_now, lo, hi))
    vals = [_interp_channel(sol, s, idx) for idx in _ACT_IDX]
    return ControllerCommand(delta=vals[0], tau=vals[1], tau_bf=vals[2],
                             tau_br=vals[3], valid_s_range=(lo, hi),
                             clamped=clamped)
