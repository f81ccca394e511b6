"""NLP layer tests: defect residuals, analytic QP, Rosenbrock, integrator
order, merit monotonicity, determinism."""

import math

import numpy as np
import pytest
import jax.numpy as jnp

from trailbrake.dynamics import NU, NX, TopologyPoint, VehicleState, spatial_derivative
from trailbrake.errors import GuessInvalidError
from trailbrake.ocp import (NlpProblem, SqpSolver, implicit_midpoint_defect)


def implicit_midpoint_step(f, x, u, ds):
    """Solve the implicit midpoint equation (Newton, handles stiff modes)."""
    from scipy.optimize import fsolve

    x = np.asarray(x, dtype=float)
    g = lambda x1: x1 - x - ds * np.asarray(f(0.5 * (x + x1), u))
    return fsolve(g, x + ds * np.asarray(f(x, u)), xtol=1e-13)


# ---------------------------------------------------------------------------
# defect residual


def test_defect_zero_when_consistent():
    f = lambda x, u: -0.3 * x + u
    x0 = np.array([1.0, -2.0])
    u = np.array([0.1, 0.2])
    ds = 0.5
    x1 = implicit_midpoint_step(f, x0, u, ds)
    res = implicit_midpoint_defect(x0, x1, u, ds, f, xp=np)
    np.testing.assert_allclose(res, 0.0, atol=1e-12)


def test_defect_linear_closed_form():
    A = np.array([[0.0, 1.0], [-2.0, -0.5]])
    f = lambda x, u: A @ x
    x0 = np.array([1.0, 0.5])
    ds = 0.2
    M = np.linalg.solve(np.eye(2) - ds / 2 * A, np.eye(2) + ds / 2 * A)
    x1 = M @ x0
    res = implicit_midpoint_defect(x0, x1, None, ds, f, xp=np)
    np.testing.assert_allclose(res, 0.0, atol=1e-12)


def test_defect_of_exact_flow_is_third_order():
    # smooth nonstiff system: defect of the true flow endpoint scales O(ds^3)
    f = lambda x, u: np.array([x[1], -np.sin(x[0]) - 0.1 * x[1]])
    x0 = np.array([1.2, 0.0])

    def rk4_endpoint(ds, n=400):
        h = ds / n
        x = x0.copy()
        for _ in range(n):
            k1 = f(x, None)
            k2 = f(x + h / 2 * k1, None)
            k3 = f(x + h / 2 * k2, None)
            k4 = f(x + h * k3, None)
            x = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        return x

    norms = []
    for ds in (0.2, 0.1):
        x1 = rk4_endpoint(ds)
        res = implicit_midpoint_defect(x0, x1, None, ds, f, xp=np)
        norms.append(np.linalg.norm(res))
    ratio = norms[0] / norms[1]
    assert 6.0 < ratio < 10.0  # O(ds^3) -> factor ~8 per halving


# ---------------------------------------------------------------------------
# solver on reference problems


def test_quadratic_with_linear_equality_matches_kkt():
    # min 0.5 z^T Q z + c^T z  s.t.  A z = b
    rng = np.random.default_rng(7)
    n, m = 8, 3
    L = rng.normal(size=(n, n))
    Q = L @ L.T + n * np.eye(n)
    c = rng.normal(size=n)
    A = rng.normal(size=(m, n))
    b = rng.normal(size=m)

    Lc = np.linalg.cholesky(Q)

    def residuals(z, pb):
        return Lc.T @ z

    def extra(z, pb):
        return c @ z

    def eqs(z, pb):
        return jnp.asarray(A) @ z - jnp.asarray(b)

    prob = NlpProblem(n=n, residuals=residuals, weights=np.full(n, 0.5),
                      lb=np.full(n, -np.inf), ub=np.full(n, np.inf),
                      equalities=eqs, extra_cost=extra)
    sol = SqpSolver(prob, tol=1e-10).solve(np.zeros(n))

    K = np.block([[Q, A.T], [A, np.zeros((m, m))]])
    zlam = np.linalg.solve(K, np.concatenate([-c, b]))
    np.testing.assert_allclose(sol.z, zlam[:n], atol=1e-8)
    assert sol.converged
    assert sol.iterations <= 3


def test_rosenbrock_with_bounds():
    def residuals(z, pb):
        return jnp.stack([10.0 * (z[1] - z[0] ** 2), 1.0 - z[0]])

    prob = NlpProblem(n=2, residuals=residuals, weights=np.ones(2),
                      lb=np.array([-2.0, -2.0]), ub=np.array([2.0, 2.0]))
    sol = SqpSolver(prob, tol=1e-10, max_iter=50).solve(np.array([-1.2, 1.0]))
    np.testing.assert_allclose(sol.z, [1.0, 1.0], atol=1e-6)
    assert sol.converged


def test_active_bound_is_respected():
    def residuals(z, pb):
        return z - jnp.array([2.0, -3.0])

    prob = NlpProblem(n=2, residuals=residuals, weights=np.ones(2),
                      lb=np.array([-1.0, -1.0]), ub=np.array([1.0, 1.0]))
    sol = SqpSolver(prob).solve(np.zeros(2))
    np.testing.assert_allclose(sol.z, [1.0, -1.0], atol=1e-8)
    assert sol.converged


def test_guess_invalid_raises():
    def residuals(z, pb):
        return jnp.stack([jnp.sqrt(z[0])])

    prob = NlpProblem(n=1, residuals=residuals, weights=np.ones(1),
                      lb=np.array([-np.inf]), ub=np.array([np.inf]))
    with pytest.raises(GuessInvalidError):
        SqpSolver(prob).solve(np.array([-1.0]))


def test_single_interval_vehicle_ocp_matches_rollout(params):
    # one free endpoint + one (regularized) input, dynamics defect only:
    # the solution must coast along the model flow
    topo = TopologyPoint()
    ds = 3.0
    x0 = VehicleState(V=20.0, omega_r=20.0 / params.r_w).as_array()

    def f_s(x, u):
        return spatial_derivative(x, u, topo, 0.0, params, drive_ratio=4.0,
                                  xp=jnp, strict=False)

    def eqs(z, pb):
        x1, u0 = z[:NX], z[NX:]
        return implicit_midpoint_defect(jnp.asarray(x0), x1, u0, ds, f_s)

    def residuals(z, pb):
        return z[NX:]  # small input regularization

    n = NX + NU
    prob = NlpProblem(n=n, residuals=residuals, weights=np.full(NU, 1e-6),
                      lb=np.full(n, -np.inf), ub=np.full(n, np.inf),
                      equalities=eqs)
    z0 = np.concatenate([x0, np.zeros(NU)])
    sol = SqpSolver(prob, tol=1e-10).solve(z0)
    assert sol.converged

    def f_np(x, u):
        return spatial_derivative(x, u, topo, 0.0, params, drive_ratio=4.0,
                                  strict=False)

    want = implicit_midpoint_step(f_np, x0, np.zeros(NU), ds)
    np.testing.assert_allclose(sol.z[:NX], want, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(sol.z[NX:], 0.0, atol=1e-8)


def test_merit_monotone_across_accepted_steps():
    def residuals(z, pb):
        return jnp.stack([10.0 * (z[1] - z[0] ** 2), 1.0 - z[0], z[2] - 0.5])

    def eqs(z, pb):
        return jnp.stack([z[0] + z[1] + z[2] - 2.0])

    prob = NlpProblem(n=3, residuals=residuals, weights=np.ones(3),
                      lb=np.full(3, -5.0), ub=np.full(3, 5.0), equalities=eqs)
    sol = SqpSolver(prob).solve(np.array([-1.0, 2.0, 0.0]))
    for before, after, _nu in sol.merit_drops:
        assert after <= before + 1e-10


def test_solver_deterministic():
    def residuals(z, pb):
        return jnp.sin(z) + 0.1 * z

    prob = NlpProblem(n=4, residuals=residuals, weights=np.ones(4),
                      lb=np.full(4, -3.0), ub=np.full(4, 3.0))
    solver = SqpSolver(prob)
    a = solver.solve(np.array([0.5, -0.4, 1.2, 2.0]))
    b = solver.solve(np.array([0.5, -0.4, 1.2, 2.0]))
    assert np.array_equal(a.z, b.z)
    assert a.iterations == b.iterations


def test_iteration_cap():
    # badly scaled nonconvex problem: must stop at the cap without raising
    def residuals(z, pb):
        return jnp.stack([jnp.sin(50.0 * z[0]) * 100.0, z[1] * 1e4 - 1.0])

    def eqs(z, pb):
        return jnp.stack([z[0] ** 2 + z[1] ** 2 - 4.0])

    prob = NlpProblem(n=2, residuals=residuals, weights=np.ones(2),
                      lb=np.full(2, -10.0), ub=np.full(2, 10.0), equalities=eqs)
    sol = SqpSolver(prob, max_iter=50).solve(np.array([1.0, 1.0]))
    assert sol.iterations <= 50


def smooth_cornering_setup(params):
    """Cornering trajectory with the fast wheel/load-transfer modes settled
    onto the slow manifold, so endpoint errors show the asymptotic order."""
    topo = TopologyPoint(kappa=0.02)
    u = np.array([0.005, 5.0, 0.0, 0.0])
    x0 = VehicleState(r=0.3, V=22.0, beta=0.01, omega_r=22.0 / params.r_w,
                      delta=0.04, tau=100.0).as_array()

    def f(x, uu):
        return spatial_derivative(x, uu, topo, 0.0, params, drive_ratio=4.0,
                                  strict=False)

    h = 0.002
    for _ in range(2000):
        k1 = f(x0, np.zeros(4))
        k2 = f(x0 + h / 2 * k1, np.zeros(4))
        k3 = f(x0 + h / 2 * k2, np.zeros(4))
        k4 = f(x0 + h * k3, np.zeros(4))
        x0 = x0 + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return f, x0, u


def test_integrator_second_order_on_cornering_rollout(params):
    """Halving ds cuts the endpoint error by ~4 (second-order accuracy)."""
    f, x0, u = smooth_cornering_setup(params)
    S = 12.0

    def rollout(ds):
        x = x0.copy()
        n = int(round(S / ds))
        for _ in range(n):
            x = implicit_midpoint_step(f, x, u, ds)
        return x

    # fine RK4 reference
    x_ref = x0.copy()
    h = S / 20000
    for _ in range(20000):
        k1 = f(x_ref, u)
        k2 = f(x_ref + h / 2 * k1, u)
        k3 = f(x_ref + h / 2 * k2, u)
        k4 = f(x_ref + h * k3, u)
        x_ref = x_ref + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    scale = np.maximum(np.abs(x_ref), 1.0)
    e1 = np.linalg.norm((rollout(1.0) - x_ref) / scale)
    e2 = np.linalg.norm((rollout(0.5) - x_ref) / scale)
    assert 3.5 <= e1 / e2 <= 4.5
