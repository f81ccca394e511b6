"""Low-level chassis layer below the predictive controller.

Lateral brake proportioning per axle side from feedforward lateral
acceleration, the induced yaw moment fed back into the prediction model, and
gear selection with hysteresis.  All functions are pure; gear bookkeeping is
carried by the caller in a GearState value.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .params import G, VehicleParams

GEAR_DWELL_S = 0.5        # minimum time between shifts [s]
GEAR_V_BAND = 0.025       # half of the 5% speed hysteresis band


@dataclass(frozen=True)
class WheelBrakeTorques:
    """Per-wheel brake torques [N*m], each <= 0."""

    fl: float = 0.0
    fr: float = 0.0
    rl: float = 0.0
    rr: float = 0.0


@dataclass(frozen=True)
class GearState:
    gear: int = 0                      # index into the ratio table
    ratio: float = 0.0                 # overall drive ratio
    engine_speed: float = 0.0          # [rad/s]
    last_shift_time: float = -1e9      # [s]
    last_shift_speed: float = 0.0      # vehicle speed at last shift [m/s]


def split_fraction(a_y, p: VehicleParams, xp=np):
    """Right-side brake share from static lateral load transfer, in [0, 1].

    Clipping to [0, 1] both prevents sign flips and moves the clamped
    residual to the other side, preserving the axle total exactly.
    """
    return xp.clip(0.5 + a_y * p.h_cg / (p.t_width * G), 0.0, 1.0)


def lateral_brake_split(tau_axle: float, a_y: float, p: VehicleParams):
    """Split an axle brake torque command into (right, left) wheel torques."""
    frac = float(split_fraction(a_y, p))
    return tau_axle * frac, tau_axle * (1.0 - frac)


def split_axle_commands(tau_bf: float, tau_br: float, a_y: float,
                        p: VehicleParams) -> WheelBrakeTorques:
    """Per-wheel brake torques from the controller's axle commands."""
    fr, fl = lateral_brake_split(tau_bf, a_y, p)
    rr, rl = lateral_brake_split(tau_br, a_y, p)
    return WheelBrakeTorques(fl=fl, fr=fr, rl=rl, rr=rr)


def yaw_moment(w: WheelBrakeTorques, delta: float, p: VehicleParams) -> float:
    """Yaw moment [N*m] induced by left/right brake torque asymmetry."""
    half_t = p.t_width / 2.0
    return (-(w.fl - w.fr) / p.r_w * np.cos(delta) * half_t
            - (w.rl - w.rr) / p.r_w * half_t)


def yaw_moment_from_split(tau_bf, tau_br, a_y, delta, p: VehicleParams, xp=np):
    """Closed-form tau_bb for axle commands split at lateral acceleration a_y.

    Backend-generic so the predictive layer can embed the chassis split in
    its differentiable dynamics: with right share f, (left - right) torque is
    tau_axle * (1 - 2f).
    """
    f = split_fraction(a_y, p, xp=xp)
    half_t = p.t_width / 2.0
    return (-(tau_bf * (1.0 - 2.0 * f)) / p.r_w * xp.cos(delta) * half_t
            - (tau_br * (1.0 - 2.0 * f)) / p.r_w * half_t)


def _deliverable_force(gear: int, V: float, p: VehicleParams) -> float:
    """Drive force [N] the engine can deliver in a gear at vehicle speed V."""
    ratio = p.drivetrain.ratios[gear]
    w_e = max(V, 0.1) / p.r_w * ratio
    if w_e > p.drivetrain.engine_speed_max:
        return -np.inf
    return p.drivetrain.max_engine_torque(w_e) * ratio / p.r_w


def _best_gear(drive_force_cmd: float, V: float, p: VehicleParams) -> int:
    """Exhaustive scan over gears maximizing deliverable force at speed V.

    Ties (several gears covering the command) resolve to the higher gear.
    If every gear over-revs, the top gear is the closest achievable."""
    n = len(p.drivetrain.ratios)
    forces = [_deliverable_force(i, V, p) for i in range(n)]
    cmd = max(drive_force_cmd, 0.0)
    meeting = [i for i in range(n) if forces[i] >= cmd]
    if meeting:
        return max(meeting)
    if all(f == -np.inf for f in forces):
        return n - 1
    return int(np.argmax(forces))


def select_gear(drive_force_cmd: float, V: float, g_state: GearState,
                p: VehicleParams, t_now: float = 0.0) -> tuple[GearState, float]:
    """Pick a gear for the commanded drive force at current speed.

    Applies a minimum dwell between shifts plus a speed hysteresis band: a
    shift only happens if the same candidate gear would be chosen at
    V*(1 -/+ band), so speed oscillation inside the band never toggles the
    gear.  Returns the updated GearState and the engine-torque equivalent of
    the command (saturated to what the gear can deliver).
    """
    cand = _best_gear(drive_force_cmd, V, p)
    shift_ok = (t_now - g_state.last_shift_time) >= GEAR_DWELL_S
    stable = (cand == _best_gear(drive_force_cmd, V * (1.0 - GEAR_V_BAND), p)
              == _best_gear(drive_force_cmd, V * (1.0 + GEAR_V_BAND), p))
    gear = g_state.gear
    if cand != gear and shift_ok and stable:
        gear = cand
        g_state = replace(g_state, gear=gear, last_shift_time=t_now,
                          last_shift_speed=V)
    ratio = p.drivetrain.ratios[gear]
    w_e = max(V, 0.1) / p.r_w * ratio
    tau_engine = drive_force_cmd * p.r_w / ratio
    tau_engine = float(np.clip(tau_engine, 0.0,
                               p.drivetrain.max_engine_torque(w_e)))
    return replace(g_state, ratio=ratio, engine_speed=w_e), tau_engine
