"""Online friction estimation with an unscented Kalman filter.

The filter carries five states -- yaw rate, velocity, sideslip, and the two
axle friction coefficients -- and propagates them through a planar
single-track reduction of the vehicle model with the actuator values frozen
at their last commanded settings.  Friction has no dynamics of its own; it
is observable only through the cross-covariance the sigma points build
between the motion states and the friction states, so the estimates move
exactly when the tires are working.

Measurements are direct readings of (r, V, beta), so the correction step is
the exact linear Kalman update on the unscented prior.  The module also
contains the offline tuning routine that picks the process-noise diagonal
and the initial friction variance by minimizing open-loop prediction error
over recorded laps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize

from .chassis import yaw_moment_from_split
from .dynamics import TopologyPoint, derated_lateral, gravity_forces, normal_loads
from .errors import ValidationError
from .params import V_FLOOR, VehicleParams

NUKF = 5                       # (r, V, beta, mu_f, mu_r)
NMEAS = 3                      # (r, V, beta)
UKF_RATE = 62.5                # nominal filter rate [Hz]
MU_CLAMP = (0.1, 1.6)          # admissible friction estimate range
_MU_EVAL = (0.05, 2.0)         # sigma-point evaluation clip (wider than clamp)
_EIG_FLOOR = 1e-10             # covariance re-conditioning floor


@dataclass(frozen=True)
class UkfTuning:
    """Noise magnitudes and sigma-point parameters.

    q_diag is the continuous-time process noise intensity (multiplied by dt
    each prediction); r_diag the measurement variances; sigma0_mu the initial
    variance placed on each friction state.
    """

    q_diag: tuple = (1e-6, 1e-3, 1e-7, 5e-5, 5e-5)
    r_diag: tuple = (0.005 ** 2, 0.05 ** 2, 0.002 ** 2)
    sigma0_mu: float = 0.04
    alpha_sp: float = 0.5
    beta_sp: float = 2.0
    kappa_sp: float = 0.0

    def validate(self) -> None:
        if len(self.q_diag) != NUKF or len(self.r_diag) != NMEAS:
            raise ValidationError("q_diag must have 5 entries, r_diag 3")
        if any(q <= 0.0 for q in self.q_diag):
            raise ValidationError("process noise diagonals must be > 0")
        if any(r <= 0.0 for r in self.r_diag):
            raise ValidationError("measurement noise diagonals must be > 0")
        if self.sigma0_mu <= 0.0:
            raise ValidationError("sigma0_mu must be > 0")
        if self.alpha_sp <= 0.0:
            raise ValidationError("alpha_sp must be > 0")


@dataclass
class UkfState:
    """Filter mean/covariance plus per-step event flags."""

    mean: np.ndarray                # (5,)
    cov: np.ndarray                 # (5, 5) symmetric PD
    t: float = 0.0
    reconditioned: bool = False     # covariance eigenvalue-floored this step
    update_skipped: bool = False    # singular innovation covariance
    clamped: bool = False           # friction mean hit its admissible range


@dataclass(frozen=True)
class FrictionEstimate:
    """Immutable snapshot handed to the controller."""

    mu_f: float
    mu_r: float
    var_f: float
    var_r: float
    t: float


def initial_state(tuning: UkfTuning, r: float = 0.0, V: float = 15.0,
                  beta: float = 0.0, mu0: tuple = (1.0, 1.0),
                  t: float = 0.0) -> UkfState:
    mean = np.array([r, V, beta, mu0[0], mu0[1]], dtype=float)
    cov = np.diag([1e-4, 1e-2, 1e-5, tuning.sigma0_mu, tuning.sigma0_mu])
    return UkfState(mean=mean, cov=cov, t=t)


# ---------------------------------------------------------------------------
# reduced prediction model


def reduced_derivative(x, frozen, topo: TopologyPoint, p: VehicleParams,
                       drive_ratio: float | None = None) -> np.ndarray:
    """Time derivative of (r, V, beta, mu_f, mu_r); friction is constant.

    Longitudinal axle forces come quasi-statically from the frozen torques
    (wheel inertia dropped); lateral forces from the friction-derated brush
    model; the brake-split yaw moment is evaluated at a_y = V*r.  Accepts a
    batch of column states (5, n) for sigma-point propagation.
    """
    if drive_ratio is None:
        drive_ratio = p.drivetrain.ratios[-1]
    delta, tau, tau_bf, tau_br = frozen
    r, V, beta = x[0], x[1], x[2]
    mu_f = np.clip(x[3], *_MU_EVAL)
    mu_r = np.clip(x[4], *_MU_EVAL)

    V_safe = np.maximum(V, V_FLOOR)
    vx = V * np.cos(beta)
    vy = V * np.sin(beta)
    vx_safe = np.maximum(vx, V_FLOOR)
    alpha_f = np.arctan((vy + p.a * r) / vx_safe) - delta
    alpha_r = np.arctan((vy - p.b * r) / vx_safe)

    Fxf = tau_bf / p.r_w
    Fxr = (tau * drive_ratio + tau_br) / p.r_w
    Fgx, Fgy = gravity_forces(topo, p)
    # quasi-static longitudinal load transfer from the known drive/brake force
    dFz = p.h_cg / p.L * (Fxf * np.cos(delta) + Fxr + Fgx)
    Fzf, Fzr = normal_loads(dFz, topo, V_safe, p, strict=False)
    Fyf = derated_lateral(alpha_f, Fxf, mu_f, Fzf, p.C_f_front)
    Fyr = derated_lateral(alpha_r, Fxr, mu_r, Fzr, p.C_f_rear)

    tau_bb = yaw_moment_from_split(tau_bf, tau_br, V * r, delta, p)
    cd, sd = np.cos(delta), np.sin(delta)
    cdb, sdb = np.cos(delta - beta), np.sin(delta - beta)
    cb, sb = np.cos(beta), np.sin(beta)

    r_dot = (p.a * Fyf * cd + p.a * Fxf * sd - p.b * Fyr + tau_bb) / p.I_z
    V_dot = (-Fyf * sdb + Fxf * cdb + (Fyr + Fgy) * sb + (Fxr + Fgx) * cb) / p.m
    beta_dot = (Fyf * cdb + Fxf * sdb + (Fyr + Fgy) * cb
                - (Fxr - Fgx) * sb) / (p.m * V_safe) - r
    zero = np.zeros_like(r_dot)
    return np.stack([r_dot, V_dot, beta_dot, zero, zero])


def reduced_step(x, dt, frozen, topo, p, drive_ratio=None) -> np.ndarray:
    """One RK4 step of the reduced model (batched over columns)."""
    f = lambda xv: reduced_derivative(xv, frozen, topo, p, drive_ratio)
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


# ---------------------------------------------------------------------------
# unscented machinery


def merwe_weights(n: int, alpha: float, beta: float, kappa: float):
    lam = alpha * alpha * (n + kappa) - n
    wm = np.full(2 * n + 1, 0.5 / (n + lam))
    wc = wm.copy()
    wm[0] = lam / (n + lam)
    wc[0] = wm[0] + 1.0 - alpha * alpha + beta
    return lam, wm, wc


def sigma_points(mean: np.ndarray, cov: np.ndarray, lam: float):
    """Scaled sigma-point columns (n, 2n+1); raises LinAlgError if cov is
    not positive definite."""
    n = mean.size
    L = np.linalg.cholesky((n + lam) * cov)
    pts = np.empty((n, 2 * n + 1))
    pts[:, 0] = mean
    pts[:, 1:n + 1] = mean[:, None] + L
    pts[:, n + 1:] = mean[:, None] - L
    return pts


def recondition(cov: np.ndarray, floor: float = _EIG_FLOOR) -> np.ndarray:
    """Symmetrize and floor the eigenvalues so Cholesky succeeds again."""
    sym = 0.5 * (cov + cov.T)
    w, U = np.linalg.eigh(sym)
    return (U * np.maximum(w, floor)) @ U.T


def unscented_propagate(mean, cov, f_step, tuning: UkfTuning):
    """Push (mean, cov) through x -> f_step(x) with scaled sigma points.

    Returns (mean', cov', reconditioned); cov' does not yet include process
    noise.
    """
    n = mean.size
    lam, wm, wc = merwe_weights(n, tuning.alpha_sp, tuning.beta_sp,
                                tuning.kappa_sp)
    reconditioned = False
    try:
        pts = sigma_points(mean, cov, lam)
    except np.linalg.LinAlgError:
        cov = recondition(cov)
        reconditioned = True
        pts = sigma_points(mean, cov, lam)
    prop = f_step(pts)
    m = prop @ wm
    d = prop - m[:, None]
    P = (d * wc) @ d.T
    return m, 0.5 * (P + P.T), reconditioned


# ---------------------------------------------------------------------------
# filter steps


def _clamp_mu(state: UkfState) -> UkfState:
    lo, hi = MU_CLAMP
    mu = state.mean[3:5]
    clamped = bool(np.any(mu <= lo) or np.any(mu >= hi))
    if clamped:
        state.mean = state.mean.copy()
        state.mean[3:5] = np.clip(mu, lo + 1e-9, hi - 1e-9)
    state.clamped = clamped
    return state


def predict(state: UkfState, dt: float, frozen_inputs, topo: TopologyPoint,
            p: VehicleParams, tuning: UkfTuning,
            drive_ratio: float | None = None) -> UkfState:
    """Sigma-point time update; Q*dt added afterwards.

    Below the velocity floor the motion model is singular, so propagation is
    skipped and only the process noise inflates the covariance.
    """
    Q = np.diag(tuning.q_diag) * dt
    if state.mean[1] < V_FLOOR:
        cov = 0.5 * (state.cov + state.cov.T) + Q
        return _clamp_mu(UkfState(mean=state.mean.copy(), cov=cov,
                                  t=state.t + dt))
    f_step = lambda pts: reduced_step(pts, dt, frozen_inputs, topo, p,
                                      drive_ratio)
    m, P, recond = unscented_propagate(state.mean, state.cov, f_step, tuning)
    return _clamp_mu(UkfState(mean=m, cov=P + Q, t=state.t + dt,
                              reconditioned=recond))


def update(state: UkfState, meas, tuning: UkfTuning) -> UkfState:
    """Exact linear measurement update on the (r, V, beta) block."""
    y = np.asarray(meas, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValidationError(f"non-finite measurement {y}")
    P = 0.5 * (state.cov + state.cov.T)
    S = P[:NMEAS, :NMEAS] + np.diag(tuning.r_diag)
    try:
        S_inv = np.linalg.inv(S)
    except np.linalg.LinAlgError:
        return replace(state, update_skipped=True)
    if np.linalg.cond(S) > 1e12:
        return replace(state, update_skipped=True)
    K = P[:, :NMEAS] @ S_inv                       # (5, 3) gain
    mean = state.mean + K @ (y - state.mean[:NMEAS])
    cov = P - K @ S @ K.T
    return _clamp_mu(UkfState(mean=mean, cov=0.5 * (cov + cov.T), t=state.t,
                              update_skipped=False,
                              reconditioned=state.reconditioned))


class FrictionUkf:
    """Single-owner stateful wrapper advancing the filter and publishing
    immutable friction snapshots for the controller."""

    def __init__(self, p: VehicleParams, tuning: UkfTuning | None = None,
                 mu0: tuple = (1.0, 1.0), V0: float = 15.0, t0: float = 0.0):
        self.p = p
        self.tuning = tuning if tuning is not None else UkfTuning()
        self.tuning.validate()
        self.state = initial_state(self.tuning, V=V0, mu0=mu0, t=t0)
        self.n_reconditioned = 0
        self.n_skipped = 0
        self.n_clamped = 0

    def step(self, dt: float, meas, frozen_inputs, topo: TopologyPoint,
             drive_ratio: float | None = None) -> FrictionEstimate:
        st = predict(self.state, dt, frozen_inputs, topo, self.p,
                     self.tuning, drive_ratio)
        st = update(st, meas, self.tuning)
        self.n_reconditioned += int(st.reconditioned)
        self.n_skipped += int(st.update_skipped)
        self.n_clamped += int(st.clamped)
        self.state = st
        return self.estimate()

    def estimate(self) -> FrictionEstimate:
        m, P = self.state.mean, self.state.cov
        return FrictionEstimate(mu_f=float(m[3]), mu_r=float(m[4]),
                                var_f=float(P[3, 3]), var_r=float(P[4, 4]),
                                t=self.state.t)


# ---------------------------------------------------------------------------
# lap logs and replay


LAP_LOG_COLUMNS = ("t", "r", "V", "beta", "delta", "tau", "tau_bf",
                   "tau_br", "s")


@dataclass
class LapLog:
    """Uniformly timestamped channel log of one lap (filter-rate samples)."""

    t: np.ndarray
    r: np.ndarray
    V: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    tau: np.ndarray
    tau_bf: np.ndarray
    tau_br: np.ndarray
    s: np.ndarray
    # topology sampled at s (filled from a track map when available)
    kappa: np.ndarray = None
    theta: np.ndarray = None
    psi: np.ndarray = None
    dtheta_ds: np.ndarray = None
    # plant ground truth, present only for simulator-generated logs
    mu_f_true: np.ndarray = None
    mu_r_true: np.ndarray = None

    def __len__(self) -> int:
        return self.t.size

    def attach_topology(self, track) -> "LapLog":
        topo = track.query_topology(self.s)
        self.kappa = np.atleast_1d(topo["kappa_ref"])
        self.theta = np.atleast_1d(topo["theta"])
        self.psi = np.atleast_1d(topo["psi"])
        self.dtheta_ds = np.atleast_1d(topo["dtheta_ds"])
        return self

    def topo_at(self, k: int) -> TopologyPoint:
        if self.kappa is None:
            return TopologyPoint()
        return TopologyPoint(kappa=float(self.kappa[k]),
                             theta=float(self.theta[k]),
                             psi=float(self.psi[k]),
                             dtheta_ds=float(self.dtheta_ds[k]))


def load_lap_csv(path, track=None) -> LapLog:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {c: np.array([float(row[c]) for row in rows]) for c in LAP_LOG_COLUMNS}
    log = LapLog(**cols)
    for extra in ("mu_f_true", "mu_r_true"):
        if rows and extra in rows[0]:
            setattr(log, extra, np.array([float(row[extra]) for row in rows]))
    if track is not None:
        log.attach_topology(track)
    return log


def save_lap_csv(path, log: LapLog) -> None:
    cols = list(LAP_LOG_COLUMNS)
    if log.mu_f_true is not None:
        cols += ["mu_f_true", "mu_r_true"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for k in range(len(log)):
            w.writerow([repr(float(getattr(log, c)[k])) for c in cols])


def run_ukf(log: LapLog, tuning: UkfTuning, p: VehicleParams,
            mu0: tuple = (1.0, 1.0)):
    """Replay the filter over one log; returns (mu_est (n,2), var (n,2), ukf)."""
    ukf = FrictionUkf(p, tuning, mu0=mu0, V0=float(log.V[0]),
                      t0=float(log.t[0]))
    ukf.state.mean[:NMEAS] = [log.r[0], log.V[0], log.beta[0]]
    n = len(log)
    mu_est = np.empty((n, 2))
    var = np.empty((n, 2))
    mu_est[0] = mu0
    var[0] = tuning.sigma0_mu
    for k in range(1, n):
        dt = float(log.t[k] - log.t[k - 1])
        frozen = (float(log.delta[k - 1]), float(log.tau[k - 1]),
                  float(log.tau_bf[k - 1]), float(log.tau_br[k - 1]))
        est = ukf.step(dt, (log.r[k], log.V[k], log.beta[k]), frozen,
                       log.topo_at(k - 1))
        mu_est[k] = est.mu_f, est.mu_r
        var[k] = est.var_f, est.var_r
    return mu_est, var, ukf


# ---------------------------------------------------------------------------
# offline tuning


@dataclass(frozen=True)
class TuningBox:
    """Box bounds for the tunable noise terms."""

    q_min: tuple = (1e-9, 1e-6, 1e-10, 1e-7, 1e-7)
    q_max: tuple = (1e-3, 1e0, 1e-4, 1e-2, 1e-2)
    s0_min: float = 1e-4
    s0_max: float = 0.25


@dataclass
class AutotuneResult:
    tuning: UkfTuning
    cost: float
    n_evals: int
    flat_cost: bool             # objective insensitive over the search
    converged: bool
    message: str = ""


def open_loop_prediction_cost(log: LapLog, mu_est: np.ndarray,
                              p: VehicleParams, y_scale: np.ndarray) -> float:
    """Sum of normalized one-step (r, V, beta) prediction errors, with the
    model's friction set to the point-wise filter estimate."""
    n = len(log)
    y = np.stack([log.r, log.V, log.beta])           # (3, n)
    x = np.zeros((NUKF, n - 1))
    x[:NMEAS] = y[:, :-1]
    x[3] = mu_est[:-1, 0]
    x[4] = mu_est[:-1, 1]
    cost = 0.0
    dt = np.diff(log.t)
    for k in range(n - 1):
        frozen = (float(log.delta[k]), float(log.tau[k]),
                  float(log.tau_bf[k]), float(log.tau_br[k]))
        x_next = reduced_step(x[:, k:k + 1], float(dt[k]), frozen,
                              log.topo_at(k), p)
        err = (x_next[:NMEAS, 0] - y[:, k + 1]) / y_scale
        cost += float(err @ err)
    return cost


def _tuning_cost(theta, dataset, base: UkfTuning, p: VehicleParams,
                 y_scales) -> float:
    tuning = replace(base, q_diag=tuple(np.exp(theta[:NUKF])),
                     sigma0_mu=float(np.exp(theta[NUKF])))
    total = 0.0
    for log, y_scale in zip(dataset, y_scales):
        mu_est, _, _ = run_ukf(log, tuning, p)
        total += open_loop_prediction_cost(log, mu_est, p, y_scale)
        if log.mu_f_true is not None:
            total += float(np.sum((mu_est[:, 0] - log.mu_f_true) ** 2))
            total += float(np.sum((mu_est[:, 1] - log.mu_r_true) ** 2))
    return total


def autotune(dataset, box: TuningBox, p: VehicleParams,
             base: UkfTuning | None = None) -> AutotuneResult:
    """Fit the process-noise diagonal and initial friction variance to lap
    logs by bounded quasi-Newton descent on open-loop prediction error.

    Channels are normalized by their per-log standard deviation so yaw rate,
    velocity, and sideslip errors weigh comparably.  Optimization runs in
    log-space over the box; a flat objective (no excitation in the data)
    is reported rather than treated as convergence.
    """
    if base is None:
        base = UkfTuning()
    y_scales = []
    for log in dataset:
        sd = np.array([np.std(log.r), np.std(log.V), np.std(log.beta)])
        y_scales.append(np.maximum(sd, 1e-6))

    lo = np.log(np.concatenate([box.q_min, [box.s0_min]]))
    hi = np.log(np.concatenate([box.q_max, [box.s0_max]]))
    x0 = 0.5 * (lo + hi)                   # geometric mid-point of the box
    costs = []

    def fun(theta):
        c = _tuning_cost(theta, dataset, base, p, y_scales)
        costs.append(c)
        return c

    res = minimize(fun, x0, method="L-BFGS-B",
                   bounds=list(zip(lo, hi)),
                   options={"maxiter": 40, "eps": 1e-3, "ftol": 1e-10})
    spread = (max(costs) - min(costs)) / max(abs(max(costs)), 1e-300)
    flat = spread < 1e-9
    xb = x0 if flat else res.x
    tuned = replace(base, q_diag=tuple(np.exp(xb[:NUKF])),
                    sigma0_mu=float(np.exp(xb[NUKF])))
    return AutotuneResult(tuning=tuned, cost=float(res.fun),
                          n_evals=len(costs), flat_cost=flat,
                          converged=bool(res.success) and not flat,
                          message=str(res.message))
