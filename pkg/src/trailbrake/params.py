"""Vehicle parameter set: geometry, inertia, tires, drivetrain, actuator limits.

All quantities are SI (m, kg, s, N, rad). Parameters are loaded from / written
to a flat JSON document; unknown keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from .errors import ValidationError

G = 9.81            # gravitational acceleration [m/s^2]
V_FLOOR = 1.0       # velocity floor regularizing low-speed singularities [m/s]
SDOT_FLOOR = 0.5    # path progression floor [m/s]


@dataclass(frozen=True)
class ActuatorLimits:
    """Hard box bounds for actuator states and their rates."""

    delta_min: float = -0.55            # roadwheel angle [rad]
    delta_max: float = 0.55
    ddelta_min: float = -0.7            # steering rate [rad/s]
    ddelta_max: float = 0.7
    omega_r_min: float = 0.0            # rear wheelspeed [rad/s]
    omega_r_max: float = 320.0
    tau_min: float = 0.0                # engine torque [N*m]
    tau_max: float = 520.0
    dtau_min: float = -4000.0           # engine torque rate [N*m/s]
    dtau_max: float = 4000.0
    tau_bf_min: float = -6500.0         # front axle brake torque [N*m], <= 0
    tau_br_min: float = -4500.0         # rear axle brake torque [N*m], <= 0
    dtau_b_min: float = -30000.0        # brake torque rate [N*m/s]
    dtau_b_max: float = 30000.0

    def validate(self) -> None:
        if not (self.delta_min < 0.0 < self.delta_max):
            raise ValidationError("steering bounds must bracket zero")
        if self.tau_bf_min >= 0.0 or self.tau_br_min >= 0.0:
            raise ValidationError("brake torque minima must be negative")
        if self.tau_min < 0.0 or self.tau_max <= 0.0:
            raise ValidationError("engine torque bounds must be non-negative")
        if self.dtau_b_min >= 0.0 or self.dtau_b_max <= 0.0:
            raise ValidationError("brake rate bounds must bracket zero")


@dataclass(frozen=True)
class Drivetrain:
    """Rear-wheel drivetrain: overall ratios and engine envelope.

    ``ratios`` are overall drive ratios (engine to rear wheels, gearbox *
    final drive).  The engine torque envelope is a piecewise-linear curve over
    engine speed, additionally capped by ``power_max``.
    """

    ratios: tuple[float, ...] = (11.5, 8.2, 6.1, 4.8, 3.8, 3.1)
    engine_speed_max: float = 700.0                 # [rad/s]
    engine_speed_idle: float = 60.0                 # [rad/s]
    curve_speeds: tuple[float, ...] = (60.0, 200.0, 400.0, 550.0, 700.0)
    curve_torques: tuple[float, ...] = (320.0, 470.0, 520.0, 500.0, 430.0)
    power_max: float = 350e3                        # [W]

    def max_engine_torque(self, engine_speed: float) -> float:
        """Deliverable engine torque at a given engine speed [N*m]."""
        w = float(np.clip(engine_speed, self.curve_speeds[0], self.curve_speeds[-1]))
        tq = float(np.interp(w, self.curve_speeds, self.curve_torques))
        if engine_speed > 1e-6:
            tq = min(tq, self.power_max / max(engine_speed, self.engine_speed_idle))
        return tq

    def validate(self) -> None:
        r = np.asarray(self.ratios)
        if len(r) == 0 or np.any(r <= 0) or np.any(np.diff(r) >= 0):
            raise ValidationError("gear ratios must be positive and strictly decreasing")
        if len(self.curve_speeds) != len(self.curve_torques):
            raise ValidationError("engine curve arrays must have equal length")
        if np.any(np.diff(self.curve_speeds) <= 0):
            raise ValidationError("engine curve speeds must be strictly increasing")


@dataclass(frozen=True)
class VehicleParams:
    """Parameters of the single-track model and its chassis layer."""

    a: float = 1.27           # CG to front axle [m]
    b: float = 1.43           # CG to rear axle [m]
    h_cg: float = 0.55        # CG height [m]
    m: float = 2000.0         # mass [kg]
    I_z: float = 3600.0       # yaw inertia [kg*m^2]
    I_w: float = 2.2          # lumped rear-axle spin inertia [kg*m^2]
    r_w: float = 0.34         # tire radius [m]
    t_width: float = 1.63     # track width [m]
    k: float = 3.01           # longitudinal load-transfer rate constant [1/s]
    C_f_front: float = 180e3  # front axle cornering stiffness [N/rad]
    C_f_rear: float = 200e3   # rear axle cornering stiffness [N/rad]
    mu_f: float = 1.0         # front friction coefficient
    mu_r: float = 1.0         # rear friction coefficient
    drivetrain: Drivetrain = field(default_factory=Drivetrain)
    limits: ActuatorLimits = field(default_factory=ActuatorLimits)

    @property
    def L(self) -> float:
        """Wheelbase [m]."""
        return self.a + self.b

    def validate(self) -> None:
        for name in ("a", "b", "h_cg", "m", "I_z", "I_w", "r_w", "t_width",
                     "C_f_front", "C_f_rear"):
            if getattr(self, name) <= 0.0:
                raise ValidationError(f"{name} must be strictly positive")
        if self.k <= 0.0:
            raise ValidationError("k must be strictly positive")
        for name in ("mu_f", "mu_r"):
            mu = getattr(self, name)
            if not (0.0 < mu <= 2.0):
                raise ValidationError(f"{name} must be in (0, 2]")
        self.drivetrain.validate()
        self.limits.validate()


def params_to_dict(p: VehicleParams) -> dict:
    return asdict(p)


def params_from_dict(doc: dict) -> VehicleParams:
    """Build VehicleParams from a JSON document, rejecting unknown keys."""
    doc = dict(doc)

    def _pop_section(key, cls):
        sub = dict(doc.pop(key, {}))
        known = set(cls.__dataclass_fields__)
        unknown = set(sub) - known
        if unknown:
            raise ValidationError(f"unknown {key} keys: {sorted(unknown)}")
        for k in list(sub):
            if isinstance(sub[k], list):
                sub[k] = tuple(sub[k])
        return cls(**sub)

    drivetrain = _pop_section("drivetrain", Drivetrain)
    limits = _pop_section("limits", ActuatorLimits)
    known = set(VehicleParams.__dataclass_fields__) - {"drivetrain", "limits"}
    unknown = set(doc) - known
    if unknown:
        raise ValidationError(f"unknown parameter keys: {sorted(unknown)}")
    p = VehicleParams(drivetrain=drivetrain, limits=limits, **doc)
    p.validate()
    return p


def load_params(path: str | Path) -> VehicleParams:
    with open(path) as fh:
        return params_from_dict(json.load(fh))


def save_params(p: VehicleParams, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(params_to_dict(p), fh, indent=2)
        fh.write("\n")
