"""Single-track vehicle model with coupled-slip brush tires, road topology
forces, and first-order longitudinal load transfer.

All functions are pure and backend-generic: they take an ``xp`` argument that
is either ``numpy`` (default; with domain validation and hard errors) or
``jax.numpy`` (no Python-level branching, so everything stays traceable and
differentiable for the NLP layer).  Numerical regularization (velocity floor,
normal-load floor in non-strict mode) is identical in both backends.

State vector layout (11 elements):

    [r, V, beta, omega_r, e, dphi, dFz, delta, tau, tau_bf, tau_br]

Input vector layout (4 elements):

    [ddelta, dtau, dtau_bf, dtau_br]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ProgressionError, TireDomainError, WheelLiftError
from .params import G, SDOT_FLOOR, V_FLOOR, VehicleParams

# state indices
IR, IV, IBETA, IOMEGA, IE, IDPHI, IDFZ, IDELTA, ITAU, ITAUBF, ITAUBR = range(11)
NX = 11
# input indices
IDDELTA, IDTAU, IDTAUBF, IDTAUBR = range(4)
NU = 4

FZ_FLOOR = 200.0    # normal-load floor in non-strict (solver/estimator) mode [N]
_SIGMA_EPS = 1e-12  # combined-slip guard for the zero-slip direction


@dataclass
class VehicleState:
    """Named view of the 11-element model state."""

    r: float = 0.0          # yaw rate [rad/s]
    V: float = 15.0         # velocity magnitude [m/s]
    beta: float = 0.0       # sideslip [rad]
    omega_r: float = 0.0    # rear wheelspeed [rad/s]
    e: float = 0.0          # lateral error [m]
    dphi: float = 0.0       # course error [rad]
    dFz: float = 0.0        # longitudinal load-transfer state [N]
    delta: float = 0.0      # roadwheel angle [rad]
    tau: float = 0.0        # engine torque [N*m]
    tau_bf: float = 0.0     # front brake torque [N*m], <= 0
    tau_br: float = 0.0     # rear brake torque [N*m], <= 0

    def as_array(self) -> np.ndarray:
        return np.array([self.r, self.V, self.beta, self.omega_r, self.e,
                         self.dphi, self.dFz, self.delta, self.tau,
                         self.tau_bf, self.tau_br], dtype=float)

    @classmethod
    def from_array(cls, x) -> "VehicleState":
        x = np.asarray(x, dtype=float)
        return cls(*x[:NX])


@dataclass
class ControlInput:
    """Named view of the 4-element rate-input vector."""

    ddelta: float = 0.0     # steering rate [rad/s]
    dtau: float = 0.0       # engine torque rate [N*m/s]
    dtau_bf: float = 0.0    # front brake torque rate [N*m/s]
    dtau_br: float = 0.0    # rear brake torque rate [N*m/s]

    def as_array(self) -> np.ndarray:
        return np.array([self.ddelta, self.dtau, self.dtau_bf, self.dtau_br],
                        dtype=float)

    @classmethod
    def from_array(cls, u) -> "ControlInput":
        u = np.asarray(u, dtype=float)
        return cls(*u[:NU])


@dataclass
class TopologyPoint:
    """Local road topology: grade, bank, grade derivative, path curvature."""

    theta: float = 0.0        # grade [rad]
    psi: float = 0.0          # bank [rad]
    dtheta_ds: float = 0.0    # grade derivative [rad/m]
    kappa: float = 0.0        # reference path curvature [1/m]


FLAT = TopologyPoint()


@dataclass
class AxleForces:
    """Per-axle tire forces, normal loads, and gravity components [N]."""

    Fxf: float
    Fyf: float
    Fxr: float
    Fyr: float
    Fzf: float
    Fzr: float
    Fgx: float
    Fgy: float


def brush_tire(alpha, kappa_slip, mu, Fz, C, xp=np):
    """Isotropic coupled-slip brush tire force, (Fy, Fx).

    Combined slip sigma = sqrt(tan(alpha)^2 + kappa_slip^2).  Below the
    saturation slip sigma_sl = 3*mu*Fz/C the total force follows the cubic
    rise; at and beyond it the force saturates at mu*Fz.  The force vector
    points along (-tan(alpha), kappa_slip).
    """
    if xp is np:
        if np.any(np.asarray(Fz) <= 0.0):
            raise TireDomainError("brush_tire requires Fz > 0")
        if np.any(np.asarray(mu) <= 0.0) or np.any(np.asarray(C) <= 0.0):
            raise TireDomainError("brush_tire requires mu > 0 and C > 0")
    ta = xp.tan(alpha)
    # the epsilon inside the sqrt keeps the zero-slip derivative finite
    # (and equal to the cornering stiffness) under automatic differentiation
    sigma = xp.sqrt(ta * ta + kappa_slip * kappa_slip + _SIGMA_EPS**2)
    mf = mu * Fz
    sigma_sl = 3.0 * mf / C
    s = xp.minimum(sigma, sigma_sl)
    f_total = C * s - C**2 * s**2 / (3.0 * mf) + C**3 * s**3 / (27.0 * mf**2)
    inv_sigma = 1.0 / sigma
    Fy = f_total * (-ta * inv_sigma)
    Fx = f_total * (kappa_slip * inv_sigma)
    return Fy, Fx


def derated_lateral(alpha, Fx, mu, Fz, C, xp=np):
    """Lateral brush force with a prescribed longitudinal force.

    The remaining friction fraction zeta = sqrt((mu*Fz)^2 - Fx^2)/(mu*Fz)
    derates the available friction, keeping the combined force inside the
    friction circle.  Used for the non-driven front axle where Fx comes
    quasi-statically from brake torque.
    """
    mf = mu * Fz
    zeta = xp.sqrt(xp.maximum(mf * mf - Fx * Fx, 1e-6 * mf * mf)) / mf
    Fy, _ = brush_tire(alpha, 0.0 * alpha, zeta * mu, Fz, C, xp=xp)
    return Fy


def slip_quantities(x, p: VehicleParams, xp=np):
    """Front/rear slip angles and rear slip ratio from the model state."""
    V, beta, r, delta = x[IV], x[IBETA], x[IR], x[IDELTA]
    vx = V * xp.cos(beta)
    vy = V * xp.sin(beta)
    vx_safe = xp.maximum(vx, V_FLOOR)
    alpha_f = xp.arctan((vy + p.a * r) / vx_safe) - delta
    alpha_r = xp.arctan((vy - p.b * r) / vx_safe)
    kappa_r = (x[IOMEGA] * p.r_w - vx) / vx_safe
    return alpha_f, alpha_r, kappa_r


def normal_loads(dFz, topo: TopologyPoint, sdot, p: VehicleParams, xp=np,
                 strict: bool = True):
    """Front/rear axle normal loads including topology and load transfer.

    A_v is the centripetal acceleration from vertical path curvature.  In
    strict (numpy) mode a non-positive load raises WheelLiftError; otherwise
    loads are floored at FZ_FLOOR so solver/estimator iterates stay evaluable.
    """
    A_v = (-topo.dtheta_ds * xp.cos(topo.psi)
           - topo.kappa * xp.sin(topo.psi) * xp.cos(topo.theta)) * sdot * sdot
    acc = G * xp.cos(topo.theta) * xp.cos(topo.psi) + A_v
    Fzf = p.b / p.L * p.m * acc - dFz
    Fzr = p.a / p.L * p.m * acc + dFz
    if strict and xp is np:
        if np.any(np.asarray(Fzf) <= 0.0) or np.any(np.asarray(Fzr) <= 0.0):
            raise WheelLiftError(f"axle normal load non-positive: Fzf={Fzf}, Fzr={Fzr}")
        return Fzf, Fzr
    return xp.maximum(Fzf, FZ_FLOOR), xp.maximum(Fzr, FZ_FLOOR)


def gravity_forces(topo: TopologyPoint, p: VehicleParams, xp=np):
    """Gravity components (Fgx, Fgy) in the vehicle frame from grade/bank."""
    Fgy = -p.m * G * xp.cos(topo.theta) * xp.sin(topo.psi)
    Fgx = p.m * G * xp.sin(topo.theta)
    return Fgx, Fgy


def path_rate(x, kappa_ref, xp=np):
    """Path progression rate sdot = V*cos(dphi)/(1 - kappa_ref*e)."""
    return x[IV] * xp.cos(x[IDPHI]) / (1.0 - kappa_ref * x[IE])


def axle_forces(x, topo: TopologyPoint, sdot, p: VehicleParams,
                mu_f=None, mu_r=None, xp=np, strict: bool = True):
    """All per-axle tire forces, normal loads, and gravity components.

    The front axle is non-driven: its longitudinal force is tau_bf/r_w
    (quasi-static) and its lateral force is friction-derated accordingly.
    The rear axle runs the full combined-slip brush model driven by the
    wheelspeed state.
    """
    mu_f = p.mu_f if mu_f is None else mu_f
    mu_r = p.mu_r if mu_r is None else mu_r
    alpha_f, alpha_r, kappa_r = slip_quantities(x, p, xp=xp)
    Fzf, Fzr = normal_loads(x[IDFZ], topo, sdot, p, xp=xp, strict=strict)
    Fgx, Fgy = gravity_forces(topo, p, xp=xp)
    Fxf = x[ITAUBF] / p.r_w
    Fyf = derated_lateral(alpha_f, Fxf, mu_f, Fzf, p.C_f_front, xp=xp)
    Fyr, Fxr = brush_tire(alpha_r, kappa_r, mu_r, Fzr, p.C_f_rear, xp=xp)
    return Fxf, Fyf, Fxr, Fyr, Fzf, Fzr, Fgx, Fgy


def axle_forces_named(x, topo: TopologyPoint, sdot, p: VehicleParams,
                      mu_f=None, mu_r=None) -> AxleForces:
    """Numpy convenience wrapper returning an AxleForces record."""
    return AxleForces(*[float(v) for v in
                        axle_forces(x, topo, sdot, p, mu_f=mu_f, mu_r=mu_r)])


def state_derivative(x, u, topo: TopologyPoint, tau_bb, p: VehicleParams,
                     mu_f=None, mu_r=None, drive_ratio=None, xp=np,
                     strict: bool = True):
    """Full temporal state derivative dx/dt of the 11-state model.

    tau_bb is the yaw moment injected by the chassis layer's lateral brake
    split.  drive_ratio is the current overall drive ratio (engine to rear
    wheels); defaults to top gear.
    """
    if drive_ratio is None:
        drive_ratio = p.drivetrain.ratios[-1]
    sdot = path_rate(x, topo.kappa, xp=xp)
    Fxf, Fyf, Fxr, Fyr, Fzf, Fzr, Fgx, Fgy = axle_forces(
        x, topo, sdot, p, mu_f=mu_f, mu_r=mu_r, xp=xp, strict=strict)

    r, V, beta, delta = x[IR], x[IV], x[IBETA], x[IDELTA]
    V_safe = xp.maximum(V, V_FLOOR)
    cd, sd = xp.cos(delta), xp.sin(delta)
    cdb, sdb = xp.cos(delta - beta), xp.sin(delta - beta)
    cb, sb = xp.cos(beta), xp.sin(beta)

    r_dot = (p.a * Fyf * cd + p.a * Fxf * sd - p.b * Fyr + tau_bb) / p.I_z
    V_dot = (-Fyf * sdb + Fxf * cdb + (Fyr + Fgy) * sb + (Fxr + Fgx) * cb) / p.m
    beta_dot = (Fyf * cdb + Fxf * sdb + (Fyr + Fgy) * cb
                - (Fxr - Fgx) * sb) / (p.m * V_safe) - r

    tau_w = x[ITAU] * drive_ratio + x[ITAUBR]
    omega_dot = (tau_w - Fxr * p.r_w) / p.I_w

    e_dot = V * xp.sin(x[IDPHI])
    phi_dot = beta_dot + r  # rotation rate of the velocity vector
    dphi_dot = phi_dot - topo.kappa * V * xp.cos(x[IDPHI]) / (1.0 - topo.kappa * x[IE])

    F_xnet = Fxr + Fxf * cd - Fyf * sd + Fgx
    dFz_dot = -p.k * (x[IDFZ] - p.h_cg / p.L * F_xnet)

    return xp.stack([r_dot, V_dot, beta_dot, omega_dot, e_dot, dphi_dot,
                     dFz_dot, u[IDDELTA], u[IDTAU], u[IDTAUBF], u[IDTAUBR]])


def spatial_derivative(x, u, topo: TopologyPoint, tau_bb, p: VehicleParams,
                       mu_f=None, mu_r=None, drive_ratio=None, xp=np,
                       strict: bool = True):
    """Spatial derivative dx/ds = (1/sdot) * dx/dt, sdot floored.

    In strict (numpy) mode a progression rate at/below the floor raises
    ProgressionError (vehicle stalled or outside the curvature radius).
    """
    sdot = path_rate(x, topo.kappa, xp=xp)
    if strict and xp is np:
        denom = 1.0 - topo.kappa * x[IE]
        if np.any(np.asarray(denom) <= 1e-3):
            raise ProgressionError(f"1 - kappa*e = {denom}: curvature singularity")
        if np.any(np.asarray(sdot) <= SDOT_FLOOR):
            raise ProgressionError(f"sdot={sdot} at/below floor {SDOT_FLOOR}")
    dxdt = state_derivative(x, u, topo, tau_bb, p, mu_f=mu_f, mu_r=mu_r,
                            drive_ratio=drive_ratio, xp=xp, strict=strict)
    return dxdt / xp.maximum(sdot, SDOT_FLOOR)


def rk4_step(f, x, dt):
    """One classic RK4 step of x' = f(x)."""
    k1 = f(x)
    k2 = f(x + 0.5 * dt * k1)
    k3 = f(x + 0.5 * dt * k2)
    k4 = f(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
