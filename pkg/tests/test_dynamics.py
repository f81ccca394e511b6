"""Vehicle model unit tests: tire oracles, load/gravity formulas, derivative
cross-checks against an independently coded scalar implementation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import jax.numpy as jnp

from trailbrake.dynamics import (
    FZ_FLOOR, IDFZ, NX, NU,
    ControlInput, TopologyPoint, VehicleState,
    brush_tire, derated_lateral, gravity_forces, normal_loads, path_rate,
    rk4_step, slip_quantities, spatial_derivative, state_derivative,
)
from trailbrake.errors import ProgressionError, TireDomainError, WheelLiftError
from trailbrake.params import G, V_FLOOR


# ---------------------------------------------------------------------------
# brush tire


def brush_integral_oracle(alpha, kappa_slip, mu, Fz, C, n=400000):
    """Brute-force integration of the brush model over the contact patch.

    Normalized patch coordinate t in [0, 1] (entry at t=0), parabolic
    pressure p(t) = 6 mu Fz t (1-t), bristle shear 2 C sigma t in adhesion.
    Total force magnitude is the integral of the pointwise minimum; the
    direction follows (-tan(alpha), kappa)/sigma.
    """
    sigma = math.sqrt(math.tan(alpha) ** 2 + kappa_slip ** 2)
    if sigma == 0.0:
        return 0.0, 0.0
    t = (np.arange(n) + 0.5) / n
    adhesion = 2.0 * C * sigma * t
    sliding = 6.0 * mu * Fz * t * (1.0 - t)
    f_total = np.minimum(adhesion, sliding).sum() / n
    return f_total * (-math.tan(alpha) / sigma), f_total * (kappa_slip / sigma)


def test_zero_slip_gives_zero_force():
    fy, fx = brush_tire(0.0, 0.0, 1.0, 5000.0, 150e3)
    assert fy == 0.0 and fx == 0.0


def test_saturated_slip_force_on_friction_circle():
    mu, Fz, C = 0.9, 4500.0, 160e3
    sigma_sl = 3 * mu * Fz / C
    alpha = math.atan(sigma_sl)  # pure lateral at exactly sigma_sl
    fy, fx = brush_tire(alpha, 0.0, mu, Fz, C)
    assert fx == pytest.approx(0.0, abs=1e-9)
    assert abs(fy) == pytest.approx(mu * Fz, rel=1e-12)
    # well past saturation, combined
    fy, fx = brush_tire(0.3, 0.4, mu, Fz, C)
    assert math.hypot(fy, fx) == pytest.approx(mu * Fz, rel=1e-12)
    sigma = math.sqrt(math.tan(0.3) ** 2 + 0.4 ** 2)
    assert fy == pytest.approx(mu * Fz * (-math.tan(0.3) / sigma), rel=1e-12)
    assert fx == pytest.approx(mu * Fz * (0.4 / sigma), rel=1e-12)


def test_cubic_matches_contact_patch_integral():
    cases = [(0.02, 0.0), (0.01, 0.03), (-0.05, 0.02), (0.0, 0.06)]
    for alpha, kap in cases:
        fy, fx = brush_tire(alpha, kap, 1.0, 5000.0, 150e3)
        oy, ox = brush_integral_oracle(alpha, kap, 1.0, 5000.0, 150e3)
        assert fy == pytest.approx(oy, rel=2e-5, abs=1e-3)
        assert fx == pytest.approx(ox, rel=2e-5, abs=1e-3)


def test_brush_tire_rejects_bad_domain():
    with pytest.raises(TireDomainError):
        brush_tire(0.1, 0.0, 1.0, -10.0, 150e3)
    with pytest.raises(TireDomainError):
        brush_tire(0.1, 0.0, -0.5, 5000.0, 150e3)


@settings(max_examples=300, deadline=None)
@given(alpha=st.floats(-1.2, 1.2), kap=st.floats(-1.0, 1.0),
       mu=st.floats(0.2, 1.6), Fz=st.floats(500.0, 12000.0),
       C=st.floats(40e3, 300e3))
def test_force_never_exceeds_friction_circle(alpha, kap, mu, Fz, C):
    fy, fx = brush_tire(alpha, kap, mu, Fz, C)
    assert math.hypot(fy, fx) <= mu * Fz * (1 + 1e-12)


@settings(max_examples=200, deadline=None)
@given(alpha=st.floats(-0.5, 0.5), kap=st.floats(-0.5, 0.5))
def test_brush_symmetry_and_direction(alpha, kap):
    mu, Fz, C = 1.0, 5000.0, 150e3
    fy, fx = brush_tire(alpha, kap, mu, Fz, C)
    fy_m, fx_m = brush_tire(-alpha, kap, mu, Fz, C)
    assert fy_m == pytest.approx(-fy, abs=1e-9)
    assert fx_m == pytest.approx(fx, abs=1e-9)
    fy_k, fx_k = brush_tire(alpha, -kap, mu, Fz, C)
    assert fx_k == pytest.approx(-fx, abs=1e-9)
    assert fy_k == pytest.approx(fy, abs=1e-9)
    # isotropic direction identity: (Fy, Fx) proportional to (-tan a, kappa)
    cross = fy * kap - fx * (-math.tan(alpha))
    assert abs(cross) <= 1e-6 * mu * Fz


def test_continuity_at_saturation_slip():
    mu, Fz, C = 1.0, 5000.0, 150e3
    sigma_sl = 3 * mu * Fz / C
    eps = 1e-9
    for sig in (sigma_sl - eps, sigma_sl, sigma_sl + eps):
        fy, _ = brush_tire(math.atan(sig), 0.0, mu, Fz, C)
        assert abs(abs(fy) - mu * Fz) < 1e-6 * mu * Fz


def test_derated_lateral_keeps_combined_force_in_circle():
    mu, Fz, C = 1.0, 5000.0, 180e3
    fx = -0.8 * mu * Fz
    fy = derated_lateral(0.2, fx, mu, Fz, C)
    assert math.hypot(fy, fx) <= mu * Fz * (1 + 1e-9)
    # with zero Fx it reduces to the pure-lateral brush force
    fy0 = derated_lateral(0.05, 0.0, mu, Fz, C)
    ref, _ = brush_tire(0.05, 0.0, mu, Fz, C)
    assert fy0 == pytest.approx(ref, rel=1e-6)


# ---------------------------------------------------------------------------
# slip quantities


def test_slip_straight_rolling(params):
    x = VehicleState(V=20.0, omega_r=20.0 / params.r_w).as_array()
    af, ar, kr = slip_quantities(x, params)
    assert af == pytest.approx(0.0, abs=1e-12)
    assert ar == pytest.approx(0.0, abs=1e-12)
    assert kr == pytest.approx(0.0, abs=1e-12)


def test_slip_pure_steer(params):
    x = VehicleState(V=20.0, delta=0.1, omega_r=20.0 / params.r_w).as_array()
    af, _, _ = slip_quantities(x, params)
    assert af == pytest.approx(-0.1, abs=1e-12)


def test_slip_kinematic_oracle(params):
    # steady cornering: explicit axle-point velocity vectors
    V, beta, r, delta = 25.0, 0.03, 0.5, 0.08
    omega = 24.0 / params.r_w
    x = VehicleState(r=r, V=V, beta=beta, omega_r=omega, delta=delta).as_array()
    af, ar, kr = slip_quantities(x, params)
    vx, vy = V * math.cos(beta), V * math.sin(beta)
    assert af == pytest.approx(math.atan2(vy + params.a * r, vx) - delta, abs=1e-12)
    assert ar == pytest.approx(math.atan2(vy - params.b * r, vx), abs=1e-12)
    assert kr == pytest.approx((omega * params.r_w - vx) / vx, abs=1e-12)


# ---------------------------------------------------------------------------
# normal loads & gravity


def test_static_flat_split(params):
    topo = TopologyPoint()
    fzf, fzr = normal_loads(0.0, topo, 30.0, params)
    assert fzf == pytest.approx(params.b / params.L * params.m * G, rel=1e-12)
    assert fzr == pytest.approx(params.a / params.L * params.m * G, rel=1e-12)


def test_load_transfer_sign_convention(params):
    topo = TopologyPoint()
    f0, r0 = normal_loads(0.0, topo, 20.0, params)
    f1, r1 = normal_loads(-2000.0, topo, 20.0, params)
    assert f1 - f0 == pytest.approx(2000.0)
    assert r1 - r0 == pytest.approx(-2000.0)


def test_banked_turn_loads_formula(params):
    topo = TopologyPoint(theta=0.0, psi=0.1, dtheta_ds=0.0, kappa=0.02)
    sdot = 30.0
    fzf, fzr = normal_loads(0.0, topo, sdot, params)
    A_v = (-0.0 * math.cos(0.1) - 0.02 * math.sin(0.1) * math.cos(0.0)) * sdot ** 2
    acc = G * math.cos(0.0) * math.cos(0.1) + A_v
    assert fzf == pytest.approx(params.b / params.L * params.m * acc, rel=1e-12)
    assert fzr == pytest.approx(params.a / params.L * params.m * acc, rel=1e-12)
    assert fzf + fzr == pytest.approx(params.m * acc, rel=1e-12)


def test_wheel_lift_raises(params):
    with pytest.raises(WheelLiftError):
        normal_loads(-params.m * G, TopologyPoint(), 20.0, params)


def test_gravity_components(params):
    assert gravity_forces(TopologyPoint(), params) == (0.0, 0.0)
    fgx, fgy = gravity_forces(TopologyPoint(theta=0.05), params)
    assert fgx == pytest.approx(params.m * G * math.sin(0.05), rel=1e-12)
    assert fgy == 0.0
    fgx, fgy = gravity_forces(TopologyPoint(theta=0.03, psi=-0.04), params)
    assert fgx == pytest.approx(params.m * G * math.sin(0.03), rel=1e-12)
    assert fgy == pytest.approx(-params.m * G * math.cos(0.03) * math.sin(-0.04),
                                rel=1e-12)


# ---------------------------------------------------------------------------
# state derivative


def scalar_reference_derivative(xs: VehicleState, u: ControlInput,
                                topo: TopologyPoint, tau_bb, p, drive_ratio):
    """Independent scalar re-implementation of the full model (math module)."""
    r, V, beta, delta = xs.r, xs.V, xs.beta, xs.delta
    vx, vy = V * math.cos(beta), V * math.sin(beta)
    vxs = max(vx, V_FLOOR)
    alpha_f = math.atan((vy + p.a * r) / vxs) - delta
    alpha_r = math.atan((vy - p.b * r) / vxs)
    kappa_r = (xs.omega_r * p.r_w - vx) / vxs

    sdot = V * math.cos(xs.dphi) / (1.0 - topo.kappa * xs.e)
    A_v = (-topo.dtheta_ds * math.cos(topo.psi)
           - topo.kappa * math.sin(topo.psi) * math.cos(topo.theta)) * sdot ** 2
    acc = G * math.cos(topo.theta) * math.cos(topo.psi) + A_v
    Fzf = p.b / p.L * p.m * acc - xs.dFz
    Fzr = p.a / p.L * p.m * acc + xs.dFz
    Fgx = p.m * G * math.sin(topo.theta)
    Fgy = -p.m * G * math.cos(topo.theta) * math.sin(topo.psi)

    def brush(al, kp, mu, Fz, C):
        ta = math.tan(al)
        sig = math.hypot(ta, kp)
        ssl = 3 * mu * Fz / C
        s = min(sig, ssl)
        ft = C * s - C * C * s * s / (3 * mu * Fz) + C ** 3 * s ** 3 / (27 * (mu * Fz) ** 2)
        if sig < 1e-12:
            return 0.0, 0.0
        return ft * (-ta / sig), ft * (kp / sig)

    Fxf = xs.tau_bf / p.r_w
    mf = p.mu_f * Fzf
    zeta = math.sqrt(max(mf * mf - Fxf * Fxf, 1e-6 * mf * mf)) / mf
    Fyf, _ = brush(alpha_f, 0.0, zeta * p.mu_f, Fzf, p.C_f_front)
    Fyr, Fxr = brush(alpha_r, kappa_r, p.mu_r, Fzr, p.C_f_rear)

    r_dot = (p.a * Fyf * math.cos(delta) + p.a * Fxf * math.sin(delta)
             - p.b * Fyr + tau_bb) / p.I_z
    V_dot = (-Fyf * math.sin(delta - beta) + Fxf * math.cos(delta - beta)
             + (Fyr + Fgy) * math.sin(beta) + (Fxr + Fgx) * math.cos(beta)) / p.m
    beta_dot = (Fyf * math.cos(delta - beta) + Fxf * math.sin(delta - beta)
                + (Fyr + Fgy) * math.cos(beta)
                - (Fxr - Fgx) * math.sin(beta)) / (p.m * max(V, V_FLOOR)) - r
    tau_w = xs.tau * drive_ratio + xs.tau_br
    omega_dot = (tau_w - Fxr * p.r_w) / p.I_w
    e_dot = V * math.sin(xs.dphi)
    dphi_dot = (beta_dot + r) - topo.kappa * V * math.cos(xs.dphi) / (1 - topo.kappa * xs.e)
    F_xnet = Fxr + Fxf * math.cos(delta) - Fyf * math.sin(delta) + Fgx
    dFz_dot = -p.k * (xs.dFz - p.h_cg / p.L * F_xnet)
    return np.array([r_dot, V_dot, beta_dot, omega_dot, e_dot, dphi_dot,
                     dFz_dot, u.ddelta, u.dtau, u.dtau_bf, u.dtau_br])


def test_braking_cornering_matches_duplicate_implementation(params, rng):
    topo = TopologyPoint(theta=0.01, psi=-0.02, dtheta_ds=0.001, kappa=0.015)
    for _ in range(20):
        xs = VehicleState(
            r=rng.uniform(-0.6, 0.6), V=rng.uniform(10, 35),
            beta=rng.uniform(-0.08, 0.08), omega_r=rng.uniform(25, 100),
            e=rng.uniform(-2, 2), dphi=rng.uniform(-0.2, 0.2),
            dFz=rng.uniform(-3000, 3000), delta=rng.uniform(-0.2, 0.2),
            tau=rng.uniform(0, 400), tau_bf=rng.uniform(-4000, 0),
            tau_br=rng.uniform(-2500, 0))
        u = ControlInput(*rng.uniform(-1, 1, 4))
        ratio = params.drivetrain.ratios[2]
        got = state_derivative(xs.as_array(), u.as_array(), topo, 350.0, params,
                               drive_ratio=ratio)
        want = scalar_reference_derivative(xs, u, topo, 350.0, params, ratio)
        np.testing.assert_allclose(got, want, rtol=1e-9, atol=1e-9)


def test_equilibrium_straight_rolling(params):
    # constant V straight: engine torque balancing nothing (no drag in model)
    V = 25.0
    x = VehicleState(V=V, omega_r=V / params.r_w).as_array()
    u = np.zeros(NU)
    dx = state_derivative(x, u, TopologyPoint(), 0.0, params, drive_ratio=3.0)
    np.testing.assert_allclose(dx, np.zeros(NX), atol=1e-10)


def test_load_transfer_fixed_point(params):
    # pure rear drive force step with dFz = 0
    V = 20.0
    tau = 100.0
    ratio = 5.0
    x = VehicleState(V=V, omega_r=V / params.r_w, tau=tau).as_array()
    dx = state_derivative(x, np.zeros(NU), TopologyPoint(), 0.0, params,
                          drive_ratio=ratio)
    # at this instant kappa_r = 0 so Fxr = 0 and F_xnet = 0: growth rate is 0
    assert dx[IDFZ] == pytest.approx(0.0, abs=1e-9)
    # with a known net force, the rise rate is k*h_cg/L*F_xnet
    x2 = VehicleState(V=V, omega_r=V / params.r_w, tau_bf=-2000.0).as_array()
    dx2 = state_derivative(x2, np.zeros(NU), TopologyPoint(), 0.0, params)
    F_xnet = -2000.0 / params.r_w
    assert dx2[IDFZ] == pytest.approx(
        params.k * params.h_cg / params.L * F_xnet, rel=1e-9)


def test_load_transfer_step_response_analytic(params):
    # dFz' = -k (dFz - c): integrate numerically, compare to analytic rise
    k = params.k
    c = 1500.0
    f = lambda y: -k * (y - c)
    for t_end in (1.0 / k, 3.0 / k):
        n = 2000
        dt = t_end / n
        y = np.array([0.0])
        for _ in range(n):
            y = rk4_step(f, y, dt)
        want = c * (1.0 - math.exp(-k * t_end))
        assert abs(y[0] - want) < 1e-6 * abs(want)


# ---------------------------------------------------------------------------
# spatial transform


def test_spatial_derivative_is_temporal_over_sdot(params):
    x = VehicleState(V=20.0, omega_r=20.0 / params.r_w, e=1.0, dphi=0.1,
                     delta=0.05, tau=100.0).as_array()
    u = np.array([0.1, 50.0, -100.0, -50.0])
    topo = TopologyPoint(kappa=0.05)
    sdot = path_rate(x, topo.kappa)
    assert sdot == pytest.approx(20.0 * math.cos(0.1) / (1 - 0.05 * 1.0), rel=1e-12)
    dxds = spatial_derivative(x, u, topo, 0.0, params, drive_ratio=4.0)
    dxdt = state_derivative(x, u, topo, 0.0, params, drive_ratio=4.0)
    np.testing.assert_allclose(dxds * sdot, dxdt, rtol=1e-12, atol=1e-12)


def test_spatial_flat_is_divide_by_V(params):
    x = VehicleState(V=18.0, omega_r=18.0 / params.r_w).as_array()
    u = np.zeros(NU)
    dxds = spatial_derivative(x, u, TopologyPoint(), 0.0, params)
    dxdt = state_derivative(x, u, TopologyPoint(), 0.0, params)
    np.testing.assert_allclose(dxds, dxdt / 18.0, rtol=1e-12, atol=1e-15)


def test_spatial_singularity_guard(params):
    x = VehicleState(V=20.0, omega_r=20.0 / params.r_w, e=19.9999).as_array()
    with pytest.raises(ProgressionError):
        spatial_derivative(x, np.zeros(NU), TopologyPoint(kappa=0.05), 0.0, params)


# ---------------------------------------------------------------------------
# backend consistency and differentiability


def test_jax_backend_matches_numpy(params, rng):
    import jax
    topo = TopologyPoint(theta=0.02, psi=0.03, dtheta_ds=0.002, kappa=0.01)
    for _ in range(5):
        x = VehicleState(
            r=rng.uniform(-0.5, 0.5), V=rng.uniform(8, 30),
            beta=rng.uniform(-0.05, 0.05), omega_r=rng.uniform(30, 90),
            dFz=rng.uniform(-2000, 2000), delta=rng.uniform(-0.2, 0.2),
            tau=rng.uniform(0, 300), tau_bf=rng.uniform(-3000, 0),
            tau_br=rng.uniform(-2000, 0)).as_array()
        u = rng.uniform(-1, 1, NU)
        a = state_derivative(x, u, topo, 100.0, params, drive_ratio=4.0)
        b = state_derivative(jnp.asarray(x), jnp.asarray(u), topo, 100.0,
                             params, drive_ratio=4.0, xp=jnp, strict=False)
        np.testing.assert_allclose(a, np.asarray(b), rtol=1e-12, atol=1e-12)


def test_autodiff_jacobian_matches_finite_differences(params, rng):
    import jax

    topo = TopologyPoint(kappa=0.01)

    def f(x):
        return state_derivative(x, jnp.zeros(NU), topo, 0.0, params,
                                drive_ratio=4.0, xp=jnp, strict=False)

    jac = jax.jacfwd(f)
    for _ in range(100):
        x = VehicleState(
            r=rng.uniform(-0.5, 0.5), V=rng.uniform(8, 30),
            beta=rng.uniform(-0.05, 0.05), omega_r=rng.uniform(30, 90),
            e=rng.uniform(-2, 2), dphi=rng.uniform(-0.1, 0.1),
            dFz=rng.uniform(-2000, 2000), delta=rng.uniform(-0.2, 0.2),
            tau=rng.uniform(0, 300), tau_bf=rng.uniform(-3000, -10),
            tau_br=rng.uniform(-2000, -10)).as_array()
        J = np.asarray(jac(jnp.asarray(x)))
        # central differences with per-state step
        J_fd = np.zeros_like(J)
        for j in range(NX):
            h = 1e-6 * max(1.0, abs(x[j]))
            xp_, xm_ = x.copy(), x.copy()
            xp_[j] += h
            xm_[j] -= h
            fp = state_derivative(xp_, np.zeros(NU), topo, 0.0, params,
                                  drive_ratio=4.0, strict=False)
            fm = state_derivative(xm_, np.zeros(NU), topo, 0.0, params,
                                  drive_ratio=4.0, strict=False)
            J_fd[:, j] = (fp - fm) / (2 * h)
        denom = np.maximum(np.abs(J_fd), 1.0)
        assert np.max(np.abs(J - J_fd) / denom) < 1e-5
