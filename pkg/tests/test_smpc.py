import numpy as np
import pytest

from smpcval.closedloop import rho_grid
from smpcval.qpcore import OPTIMAL, PRIMAL_INFEASIBLE, QpSettings, solve_qp
from smpcval.smpc import (ControllerError, Layout, PenaltyController, build_cost,
                          build_penalty_problem, build_tightened_problem, kappa)
from smpcval.sysmodel import ControllerDesign, LtiSystem, closed_loop_matrix
from smpcval.tightening import TighteningProfile


def loop_cost(sys, design, z, v):
    A_K = closed_loop_matrix(sys, design.K)
    J = 0.0
    for l in range(design.N):
        u = design.K @ z[l] + v[l]
        J += z[l] @ design.Q @ z[l] + u @ design.R @ u
    x_N = A_K @ z[-1] + sys.B @ v[-1]
    return J + x_N @ design.P @ x_N


def test_cost_matches_loop(example_system, example_design):
    H = build_cost(example_system, example_design)
    lay = Layout(2, 1, 8)
    rng = np.random.default_rng(0)
    for _ in range(20):
        y = rng.normal(size=lay.n)
        d = lay.unpack(y)
        ref = loop_cost(example_system, example_design, d.z, d.v)
        assert 0.5 * y @ H @ y == pytest.approx(ref, rel=1e-10)
    assert np.linalg.eigvalsh(H).min() >= -1e-9


def test_cost_scalar_horizon_one():
    sys = LtiSystem.from_boxes([[0.9]], [[0.5]], [1.0], [1.0])
    design = ControllerDesign.from_system(sys, [[2.0]], [[3.0]], 1)
    H = build_cost(sys, design)
    z0, v0 = 0.7, -0.4
    K, P = design.K[0, 0], design.P[0, 0]
    ref = 2.0 * z0 ** 2 + 3.0 * (K * z0 + v0) ** 2 + P * ((0.9 + 0.5 * K) * z0 + 0.5 * v0) ** 2
    y = np.array([z0, v0])
    assert 0.5 * y @ H @ y == pytest.approx(ref, rel=1e-12)


def _check_horizon(sys, design, d, x, tol=1e-6):
    A_K = closed_loop_matrix(sys, design.K)
    np.testing.assert_allclose(d.z[0], x, atol=tol)
    for l in range(design.N - 1):
        np.testing.assert_allclose(d.z[l + 1], A_K @ d.z[l] + sys.B @ d.v[l], atol=tol)
    np.testing.assert_allclose(d.z[-1], A_K @ d.z[-1] + sys.B @ d.v[-1], atol=tol)


def test_tightened_origin_is_zero(example_system, example_design):
    zero = TighteningProfile(q=np.zeros((8, 6)), levels=None, S_q=0, seed=0)
    sol = solve_qp(build_tightened_problem(np.zeros(2), example_system, example_design, zero))
    assert sol.status == OPTIMAL
    assert np.abs(sol.y_star).max() <= 1e-8 and abs(sol.objective) <= 1e-12


def test_tightened_far_state_infeasible(example_system, example_design, example_profile):
    p = build_tightened_problem([20.0, 30.0], example_system, example_design, example_profile)
    assert solve_qp(p).status == PRIMAL_INFEASIBLE


def test_tightened_solution_meets_constraints(example_system, example_design, example_profile,
                                              feasible_states):
    lay = Layout(2, 1, 8)
    for x in feasible_states[:20]:
        p = build_tightened_problem(x, example_system, example_design, example_profile)
        sol = solve_qp(p)
        assert sol.status == OPTIMAL
        d = lay.unpack(sol.y_star)
        _check_horizon(example_system, example_design, d, x)
        rows = d.z @ example_design.C_K.T + d.v @ example_system.D.T
        assert np.all(rows <= example_system.h - example_profile.q + 1e-6)


def test_penalty_origin(example_system, example_design, example_profile):
    ctrl = PenaltyController(example_system, example_design, example_profile, 100.0)
    u, sol = ctrl.kappa_batch(np.zeros((1, 2)))
    assert abs(u[0, 0]) <= 1e-9
    assert np.abs(ctrl.decision(sol).eta).max() <= 1e-9


def test_penalty_outside_region(example_system, example_design, example_profile):
    ctrl = PenaltyController(example_system, example_design, example_profile, 10.0)
    x = np.array([2.05, 0.0])  # beyond the state box, so no tightened plan exists
    p = build_tightened_problem(x, example_system, example_design, example_profile)
    assert solve_qp(p).status == PRIMAL_INFEASIBLE
    u, sol = ctrl.kappa_batch(x[None])
    assert sol.status[0] == OPTIMAL
    assert ctrl.decision(sol).eta.max() > 1e-6
    assert abs(u[0, 0]) <= 0.2 + 1e-6
    _check_horizon(example_system, example_design, ctrl.decision(sol), x)


def test_exact_penalty_matches_tightened(example_system, example_design, example_profile,
                                         feasible_states):
    ctrl = PenaltyController(example_system, example_design, example_profile, 1e9)
    u, sol = ctrl.kappa_batch(feasible_states)
    lay = Layout(2, 1, 8)
    for i, x in enumerate(feasible_states):
        ref = solve_qp(build_tightened_problem(x, example_system, example_design, example_profile))
        d = ctrl.decision(sol, i)
        r = lay.unpack(ref.y_star)
        np.testing.assert_allclose(d.z, r.z, atol=1e-4)
        np.testing.assert_allclose(d.v, r.v, atol=1e-4)
        assert np.abs(d.eta).max() <= 1e-6
        assert u[i, 0] == pytest.approx(r.v[0, 0] + example_design.K[0] @ x, abs=1e-4)


def test_violation_nonincreasing_in_rho(example_system, example_design, example_profile):
    X = np.array([[1.9, 2.9], [-1.95, 2.5], [1.5, -2.8], [0.3, 0.2]])
    prev = np.full(len(X), np.inf)
    for rho in rho_grid(1.0, 1e6, 100):
        ctrl = PenaltyController(example_system, example_design, example_profile, rho)
        _, sol = ctrl.kappa_batch(X)
        total = np.array([ctrl.decision(sol, i).eta.sum() for i in range(len(X))])
        assert np.all(total <= prev + 1e-8)
        prev = total


def test_hard_input_bound(example_system, example_design, example_profile):
    X = np.random.default_rng(2).uniform([-2, -3], [2, 3], size=(500, 2))
    for rho in (10.0, 100.0, 1e4):
        u, _ = PenaltyController(example_system, example_design, example_profile, rho).kappa_batch(X)
        assert np.abs(u).max() <= 0.2 + 1e-6


def test_per_step_slack_mode(example_system, example_design, example_profile):
    ctrl = PenaltyController(example_system, example_design, example_profile, 50.0,
                             slack_mode="per_step")
    u, sol = ctrl.kappa_batch(np.array([[1.9, 2.9]]))
    d = ctrl.decision(sol)
    assert d.eta.shape == (8, 6) and d.eta.min() >= -1e-9
    assert abs(u[0, 0]) <= 0.2 + 1e-6
    penalty = build_penalty_problem(np.array([1.9, 2.9]), ctrl)
    assert penalty.n == 8 * 2 + 8 + 48


def test_kappa_single_state(example_system, example_design, example_profile):
    ctrl = PenaltyController(example_system, example_design, example_profile, 100.0)
    assert kappa(np.zeros(2), ctrl).shape == (1,)


def test_construction_checks(example_system, example_design, example_profile):
    with pytest.raises(ValueError):
        PenaltyController(example_system, example_design, example_profile, 0.0)
    with pytest.raises(ValueError):
        PenaltyController(example_system, example_design, example_profile, 1.0, slack_mode="x")
    # second mode is uncontrollable but stable, so the gain itself is admissible
    sys = LtiSystem.from_boxes(np.diag([1.0, 0.5]), [[1.0], [0.0]], [1, 1], [1])
    design = ControllerDesign.from_system(sys, np.eye(2), [[1.0]], 4, K=[[-0.5, 0.0]])
    with pytest.raises(ValueError, match="controllable"):
        PenaltyController(sys, design, TighteningProfile(np.zeros((4, 6)), None, 0, 0), 1.0)


def test_solver_failure_carries_diagnostics(example_system, example_design, example_profile):
    ctrl = PenaltyController(example_system, example_design, example_profile, 1e4,
                             settings=QpSettings(max_iter=1, polish=False))
    with pytest.raises(ControllerError) as err:
        ctrl.kappa_batch(np.array([[1.9, 2.9]]))
    assert err.value.diagnostics["rho"] == 1e4
