"""Sampled curvilinear track: topology channels, bounds, reference trajectory.

A TrackMap stores per-sample arrays over path distance s (spacing <= 1 m from
the synthesizer) plus a global-frame centerline used by the simulator for
pose projection.  Lookup is linear interpolation in s; closed tracks wrap
modulo total length.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ReferenceGenerationError, TrackRangeError, ValidationError
from .params import G, VehicleParams

_TOPO_FIELDS = ("kappa_ref", "theta", "psi", "dtheta_ds", "e_min", "e_max")
_REF_FIELDS = ("V_ref", "r_ref", "beta_ref", "tau_bf_ref", "tau_br_ref",
               "dtau_bf_ref", "dtau_br_ref", "a_y_ref")


@dataclass
class TrackSample:
    s: float
    kappa_ref: float
    theta: float
    psi: float
    dtheta_ds: float
    e_min: float
    e_max: float


@dataclass
class ReferenceSample:
    s: float
    V_ref: float
    r_ref: float
    beta_ref: float
    tau_bf_ref: float
    tau_br_ref: float
    dtau_bf_ref: float
    dtau_br_ref: float
    a_y_ref: float


class TrackMap:
    """Immutable sampled track with topology, bounds and reference channels."""

    def __init__(self, s, kappa_ref, theta, psi, dtheta_ds, e_min, e_max,
                 closed=False, centerline_xy=None, heading=None,
                 reference=None):
        self.s = np.asarray(s, dtype=float)
        if self.s.size < 2 or np.any(np.diff(self.s) <= 0):
            raise ValidationError("track s samples must be strictly increasing")
        self.kappa_ref = np.asarray(kappa_ref, dtype=float)
        self.theta = np.asarray(theta, dtype=float)
        self.psi = np.asarray(psi, dtype=float)
        self.dtheta_ds = np.asarray(dtheta_ds, dtype=float)
        self.e_min = np.asarray(e_min, dtype=float)
        self.e_max = np.asarray(e_max, dtype=float)
        if np.any(self.e_min >= 0) or np.any(self.e_max <= 0):
            raise ValidationError("track bounds must satisfy e_min < 0 < e_max")
        for name in _TOPO_FIELDS:
            if getattr(self, name).shape != self.s.shape:
                raise ValidationError(f"channel {name} shape mismatch")
        self.closed = bool(closed)
        self.total_length = float(self.s[-1])
        if centerline_xy is not None:
            self.centerline_xy = np.asarray(centerline_xy, dtype=float)
            self.heading = np.asarray(heading, dtype=float)
        else:
            self.centerline_xy, self.heading = _integrate_centerline(
                self.s, self.kappa_ref)
        self.reference = None
        if reference is not None:
            self.set_reference(reference)

    # -- reference channel ------------------------------------------------

    def set_reference(self, ref: dict) -> None:
        """Attach reference-trajectory channels (dict of arrays incl. 's')."""
        ref = {k: np.asarray(v, dtype=float) for k, v in ref.items()}
        missing = {"s", *_REF_FIELDS} - set(ref)
        if missing:
            raise ValidationError(f"reference missing channels: {sorted(missing)}")
        if np.any(ref["V_ref"] <= 0):
            raise ValidationError("V_ref must be strictly positive")
        if np.any(ref["tau_bf_ref"] > 1e-9) or np.any(ref["tau_br_ref"] > 1e-9):
            raise ValidationError("brake references must be <= 0")
        self.reference = ref

    # -- lookup -----------------------------------------------------------

    def _wrap(self, s):
        s = np.asarray(s, dtype=float)
        if self.closed:
            return np.mod(s, self.total_length)
        if np.any(s < self.s[0] - 1e-9) or np.any(s > self.total_length + 1e-9):
            raise TrackRangeError(f"s={s} outside open track [0, {self.total_length}]")
        return np.clip(s, self.s[0], self.total_length)

    def query_topology(self, s) -> dict:
        """Vectorized linear interpolation of the topology/bounds channels."""
        sw = self._wrap(s)
        return {name: np.interp(sw, self.s, getattr(self, name))
                for name in _TOPO_FIELDS}

    def query_reference(self, s) -> dict:
        """Vectorized linear interpolation of the reference channels."""
        if self.reference is None:
            raise ValidationError("track has no reference trajectory")
        sw = self._wrap(s)
        rs = self.reference["s"]
        return {name: np.interp(sw, rs, self.reference[name])
                for name in _REF_FIELDS}

    def query(self, s: float) -> tuple[TrackSample, ReferenceSample | None]:
        """Interpolated track and reference samples at path distance s."""
        topo = self.query_topology(s)
        ts = TrackSample(s=float(s), **{k: float(v) for k, v in topo.items()})
        rs = None
        if self.reference is not None:
            ref = self.query_reference(s)
            rs = ReferenceSample(s=float(s), **{k: float(v) for k, v in ref.items()})
        return ts, rs

    def pose_at(self, s):
        """Centerline position (x, y) and heading at path distance s."""
        sw = self._wrap(s)
        x = np.interp(sw, self.s, self.centerline_xy[:, 0])
        y = np.interp(sw, self.s, self.centerline_xy[:, 1])
        h = np.interp(sw, self.s, np.unwrap(self.heading))
        return x, y, h

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        doc = {
            "closed": self.closed,
            "samples": {"s": self.s.tolist(),
                        **{k: getattr(self, k).tolist() for k in _TOPO_FIELDS}},
        }
        if self.reference is not None:
            doc["reference"] = {k: v.tolist() for k, v in self.reference.items()}
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "TrackMap":
        doc = dict(doc)
        samples = dict(doc.pop("samples"))
        closed = doc.pop("closed", False)
        reference = doc.pop("reference", None)
        if doc:
            raise ValidationError(f"unknown track file keys: {sorted(doc)}")
        unknown = set(samples) - {"s", *_TOPO_FIELDS}
        if unknown:
            raise ValidationError(f"unknown sample channels: {sorted(unknown)}")
        tm = cls(s=samples["s"], closed=closed,
                 **{k: samples[k] for k in _TOPO_FIELDS})
        if reference is not None:
            tm.set_reference(reference)
        return tm

    def save(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)
            fh.write("\n")

    @classmethod
    def load(cls, path: str | Path) -> "TrackMap":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _integrate_centerline(s, kappa):
    """Integrate heading/position along s from the curvature profile."""
    heading = np.concatenate([[0.0], np.cumsum(
        0.5 * (kappa[1:] + kappa[:-1]) * np.diff(s))])
    ds = np.diff(s)
    x = np.concatenate([[0.0], np.cumsum(
        0.5 * (np.cos(heading[1:]) + np.cos(heading[:-1])) * ds)])
    y = np.concatenate([[0.0], np.cumsum(
        0.5 * (np.sin(heading[1:]) + np.sin(heading[:-1])) * ds)])
    return np.stack([x, y], axis=1), heading


# -- synthesis ------------------------------------------------------------


@dataclass
class Straight:
    length: float
    grade: float = 0.0   # grade reached at feature end [rad]
    bank: float = 0.0    # bank reached at feature end [rad]


@dataclass
class Arc:
    radius: float
    angle: float         # signed total heading change [rad]; sign = turn direction
    grade: float = 0.0
    bank: float = 0.0

    @property
    def length(self) -> float:
        return self.radius * abs(self.angle)


@dataclass
class Clothoid:
    length: float
    kappa0: float
    kappa1: float
    grade: float = 0.0
    bank: float = 0.0


def synth_track(features, half_width=4.0, sample_ds=1.0, closed=False,
                min_radius=2.0) -> TrackMap:
    """Build a TrackMap from a list of Straight/Arc/Clothoid features.

    Grade and bank are linear ramps ending at each feature's (grade, bank)
    value.  Curvature is C0 across features by construction of the feature
    set (use Clothoid segments for smooth curvature transitions).
    """
    if not features:
        raise ValidationError("feature list is empty")
    for f in features:
        if isinstance(f, Arc) and f.radius < min_radius:
            raise ValidationError(f"arc radius {f.radius} below minimum {min_radius}")
        if f.length <= 0:
            raise ValidationError("feature length must be positive")

    total = sum(f.length for f in features)
    n = max(int(np.ceil(total / sample_ds)) + 1, 2)
    s = np.linspace(0.0, total, n)
    kappa = np.zeros(n)
    theta = np.zeros(n)
    psi = np.zeros(n)

    s0 = 0.0
    g_prev, b_prev = 0.0, 0.0
    for f in features:
        s1 = s0 + f.length
        mask = (s >= s0 - 1e-12) & (s <= s1 + 1e-12)
        frac = np.clip((s[mask] - s0) / f.length, 0.0, 1.0)
        if isinstance(f, Straight):
            kappa[mask] = 0.0
        elif isinstance(f, Arc):
            kappa[mask] = np.sign(f.angle) / f.radius
        elif isinstance(f, Clothoid):
            kappa[mask] = f.kappa0 + (f.kappa1 - f.kappa0) * frac
        else:
            raise ValidationError(f"unknown feature type {type(f).__name__}")
        theta[mask] = g_prev + (f.grade - g_prev) * frac
        psi[mask] = b_prev + (f.bank - b_prev) * frac
        g_prev, b_prev = f.grade, f.bank
        s0 = s1

    dtheta_ds = np.gradient(theta, s)
    e_max = np.full(n, half_width)
    e_min = np.full(n, -half_width)
    return TrackMap(s, kappa, theta, psi, dtheta_ds, e_min, e_max, closed=closed)


# -- reference generation -------------------------------------------------


def _engine_accel_cap(v, p: VehicleParams):
    """Max drive acceleration from the engine over all gears at speed v."""
    best = 0.0
    for ratio in p.drivetrain.ratios:
        w_e = max(v, 0.1) / p.r_w * ratio
        if w_e > p.drivetrain.engine_speed_max:
            continue
        force = p.drivetrain.max_engine_torque(w_e) * ratio / p.r_w
        best = max(best, force)
    return best / p.m


def _friction_ax(v, kappa, mu_eff, g_n):
    """Remaining longitudinal tire acceleration inside the friction circle."""
    a_y = kappa * v * v
    cap2 = (mu_eff * g_n) ** 2 - a_y * a_y
    return np.sqrt(max(cap2, 0.0))


def _apply_passes(track: TrackMap, v_cap_profile, mu_eff_arr, g_n, p):
    """Forward acceleration-limited and backward braking-limited passes."""
    s = track.s
    ds = np.diff(s)
    theta = track.theta
    kappa = np.abs(track.kappa_ref)
    v = v_cap_profile.copy()
    sweeps = 2 if track.closed else 1

    for _ in range(sweeps):
        # forward: acceleration limited
        for i in range(len(s) - 1):
            ax = min(_friction_ax(v[i], kappa[i], mu_eff_arr[i], g_n[i]),
                     _engine_accel_cap(v[i], p)) + G * np.sin(theta[i])
            ax = max(ax, 0.0)
            v[i + 1] = min(v[i + 1], np.sqrt(v[i] ** 2 + 2.0 * ds[i] * ax))
        if track.closed:
            v[0] = min(v[0], v[-1])
        # backward: braking limited
        for i in range(len(s) - 2, -1, -1):
            ax = _friction_ax(v[i + 1], kappa[i + 1], mu_eff_arr[i + 1], g_n[i + 1]) \
                - G * np.sin(theta[i + 1])
            ax = max(ax, 0.0)
            v[i] = min(v[i], np.sqrt(v[i + 1] ** 2 + 2.0 * ds[i] * ax))
        if track.closed:
            v[-1] = min(v[-1], v[0])
    return v


def generate_reference(track: TrackMap, p: VehicleParams, mu_nominal=None,
                       mu_lim: float = 1.0, v_cap: float = 42.0) -> dict:
    """Quasi-steady-state speed profile and reference channels for a track.

    Standard three-pass friction-circle profile: curvature-limited apex
    speeds, a forward acceleration-limited pass, and a backward
    braking-limited pass, all against mu_lim * mu_nominal and
    topology-adjusted normal acceleration.  Brake torque references are
    split front/rear by the quasi-static load distribution.

    Returns the reference dict (also attached to the track in place).
    """
    mu_nominal = 0.5 * (p.mu_f + p.mu_r) if mu_nominal is None else mu_nominal
    s = track.s
    kappa = track.kappa_ref
    abs_k = np.abs(kappa)
    mu_eff = mu_lim * mu_nominal
    g_n0 = G * np.cos(track.theta) * np.cos(track.psi)

    # curvature-limited apex speeds on the un-adjusted normal acceleration
    with np.errstate(divide="ignore"):
        v_apex = np.sqrt(np.where(abs_k > 1e-9, mu_eff * g_n0 / np.maximum(abs_k, 1e-9),
                                  np.inf))
    v0 = np.minimum(v_apex, v_cap)

    # one fixed-point refinement of the vertical-curvature term A_v, then
    # hold the caps fixed so the passes are idempotent
    A_v = (-track.dtheta_ds * np.cos(track.psi)
           - kappa * np.sin(track.psi) * np.cos(track.theta)) * v0 ** 2
    g_n = np.maximum(g_n0 + A_v, 0.2 * G)
    with np.errstate(divide="ignore"):
        v_apex = np.sqrt(np.where(abs_k > 1e-9, mu_eff * g_n / np.maximum(abs_k, 1e-9),
                                  np.inf))
    v0 = np.minimum(v_apex, v_cap)
    if np.any(v0 < 1.0):
        raise ReferenceGenerationError("curvature demands speed below the model floor")

    mu_eff_arr = np.full_like(s, mu_eff)
    v = _apply_passes(track, v0, mu_eff_arr, g_n, p)
    if np.any(v < 1.0):
        raise ReferenceGenerationError("profile infeasible: speed below floor")

    # longitudinal tire acceleration demanded by the profile
    dv2 = np.gradient(v ** 2, s)
    ax_tire = 0.5 * dv2 - G * np.sin(track.theta)

    # brake references where the profile demands deceleration
    brake_force = np.minimum(p.m * ax_tire, 0.0)
    frac_f = np.clip(p.b / p.L + (p.h_cg / p.L) * (-ax_tire / g_n), 0.0, 1.0)
    tau_bf = np.clip(frac_f * brake_force * p.r_w, p.limits.tau_bf_min, 0.0)
    tau_br = np.clip((1.0 - frac_f) * brake_force * p.r_w, p.limits.tau_br_min, 0.0)

    dtau_bf = np.gradient(tau_bf, s) * v
    dtau_br = np.gradient(tau_br, s) * v

    ref = {
        "s": s.copy(),
        "V_ref": v,
        "r_ref": kappa * v,
        "beta_ref": np.zeros_like(s),
        "tau_bf_ref": tau_bf,
        "tau_br_ref": tau_br,
        "dtau_bf_ref": dtau_bf,
        "dtau_br_ref": dtau_br,
        "a_y_ref": kappa * v ** 2,
    }
    track.set_reference(ref)
    return ref
