"""Limit-handling vehicle control stack.

Adaptive nonlinear model predictive control with dynamic brake balance,
online tire-friction estimation, a hierarchical chassis layer, and a
closed-loop simulation harness.
"""

__version__ = "0.1.0"

# the solver and estimator need double precision throughout
import jax as _jax

_jax.config.update("jax_enable_x64", True)

from .params import VehicleParams, Drivetrain, ActuatorLimits, G, V_FLOOR, SDOT_FLOOR
from .dynamics import (VehicleState, ControlInput, TopologyPoint, AxleForces,
                       brush_tire, slip_quantities, normal_loads, gravity_forces,
                       state_derivative, spatial_derivative)
from .track import TrackMap, Straight, Arc, Clothoid, synth_track, generate_reference
from .chassis import (WheelBrakeTorques, GearState, lateral_brake_split,
                      yaw_moment, select_gear)

__all__ = [
    "VehicleParams", "Drivetrain", "ActuatorLimits", "G", "V_FLOOR", "SDOT_FLOOR",
    "VehicleState", "ControlInput", "TopologyPoint", "AxleForces",
    "brush_tire", "slip_quantities", "normal_loads", "gravity_forces",
    "state_derivative", "spatial_derivative",
    "TrackMap", "Straight", "Arc", "Clothoid", "synth_track", "generate_reference",
    "WheelBrakeTorques", "GearState", "lateral_brake_split", "yaw_moment",
    "select_gear",
]
