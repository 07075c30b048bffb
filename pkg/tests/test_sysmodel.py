import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import given, settings, strategies as st

from smpcval.sysmodel import (ControllerDesign, DimensionError, LtiSystem, RiccatiError, box_rows,
                              closed_loop_matrix, riccati_residual, solve_dlqr,
                              solve_riccati_for_P, spectral_radius, stage_cost)

from conftest import EXAMPLE_A, EXAMPLE_B


def test_box_rows_expand_to_six_rows():
    C, D, h = box_rows([2, 3], [0.2])
    assert C.shape == (6, 2) and D.shape == (6, 1)
    np.testing.assert_array_equal(h, [2, 2, 3, 3, 0.2, 0.2])
    x, u = np.array([1.9, -2.9]), np.array([0.19])
    assert np.all(C @ x + D @ u <= h)
    assert np.any(C @ np.array([2.1, 0.0]) + D @ u > h)


def test_system_rejects_inconsistent_shapes():
    with pytest.raises((DimensionError, ValueError)):
        LtiSystem(np.eye(2), np.ones((3, 1)), np.eye(2), np.zeros((2, 1)), [1, 1])


def test_closed_loop_matrix_cases():
    sys = LtiSystem(np.eye(2), np.zeros((2, 1)), np.eye(2), np.zeros((2, 1)), [1, 1])
    np.testing.assert_array_equal(closed_loop_matrix(sys, [[3.0, -1.0]]), np.eye(2))
    scalar = LtiSystem([[1.0]], [[1.0]], [[1.0]], [[0.0]], [1.0])
    assert closed_loop_matrix(scalar, [[-0.5]])[0, 0] == 0.5
    with pytest.raises(DimensionError) as err:
        closed_loop_matrix(scalar, np.ones((1, 2)))
    assert err.value.pair == ("B", "K")


def test_published_gain_is_stabilizing(example_system):
    A_K = closed_loop_matrix(example_system, [[-0.2858, 0.4910]])
    assert spectral_radius(A_K) < 1.0


def test_riccati_scalar_geometric_series():
    P = solve_riccati_for_P([[0.5]], [[1.0]], [[1.0]], [[0.0]])
    assert P[0, 0] == pytest.approx(4.0 / 3.0, rel=1e-12)


def test_riccati_zero_closed_loop_is_one_step():
    Q, R, K = np.diag([1.0, 2.0]), np.array([[3.0]]), np.array([[0.5, -1.0]])
    P = solve_riccati_for_P(np.zeros((2, 2)), Q, R, K)
    np.testing.assert_allclose(P, Q + K.T @ R @ K, atol=1e-15)


def test_riccati_diverges_for_unstable_closed_loop():
    with pytest.raises(RiccatiError):
        solve_riccati_for_P([[1.1]], [[1.0]], [[1.0]], [[0.0]], max_iter=5000)


def test_dlqr_matches_scipy_are(example_system):
    Q, R = np.diag([1.0, 10.0]), np.array([[1.0]])
    K, P = solve_dlqr(example_system.A, example_system.B, Q, R)
    A, B = example_system.A, example_system.B
    P_ref = sla.solve_discrete_are(A, B, Q, R)
    K_ref = -np.linalg.solve(R + B.T @ P_ref @ B, B.T @ P_ref @ A)   # u = K x
    np.testing.assert_allclose(P, P_ref, rtol=1e-8)
    np.testing.assert_allclose(K, K_ref, rtol=1e-8)
    np.testing.assert_allclose(K[0], [-0.2858, 0.4910], atol=5e-4)


def test_two_riccati_paths_agree(example_system):
    Q, R = np.diag([1.0, 10.0]), np.array([[1.0]])
    K, P = solve_dlqr(example_system.A, example_system.B, Q, R)
    P2 = solve_riccati_for_P(closed_loop_matrix(example_system, K), Q, R, K)
    np.testing.assert_allclose(P2, P, atol=1e-8 * np.abs(P).max())


def test_design_riccati_residual(example_system, example_design):
    A_K = closed_loop_matrix(example_system, example_design.K)
    res = riccati_residual(A_K, example_design.Q, example_design.R, example_design.K,
                           example_design.P)
    assert res <= 1e-9 * max(1.0, np.linalg.norm(example_design.P))
    np.testing.assert_array_equal(example_design.C_K,
                                  example_system.C + example_system.D @ example_design.K)


def test_dlqr_without_actuation_gives_zero_gain():
    K, _ = solve_dlqr(0.5 * np.eye(2), np.zeros((2, 1)), np.eye(2), [[1.0]])
    np.testing.assert_array_equal(K, 0.0)


def test_dlqr_expensive_input_gives_small_gain():
    K, _ = solve_dlqr([[0.5]], [[1.0]], [[1.0]], [[1e9]])
    assert abs(K[0, 0]) < 1e-4


def test_design_rejects_destabilizing_gain(example_system):
    with pytest.raises(ValueError):
        ControllerDesign.from_system(example_system, np.eye(2), [[1.0]], 8, K=[[1.0, 1.0]])


def test_stage_cost_cases():
    assert stage_cost([0, 0], [0], np.eye(2), [[1]]) == 0.0
    assert stage_cost([1, 2], [3], np.eye(2), [[1]]) == 14.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_stage_cost_matches_elementwise_sum(seed):
    rng = np.random.default_rng(seed)
    x, u = rng.normal(size=3), rng.normal(size=2)
    Q, R = rng.normal(size=(3, 3)), rng.normal(size=(2, 2))
    Q, R = Q @ Q.T, R @ R.T + np.eye(2)
    ref = sum(x[i] * Q[i, j] * x[j] for i in range(3) for j in range(3)) + \
        sum(u[i] * R[i, j] * u[j] for i in range(2) for j in range(2))
    assert stage_cost(x, u, Q, R) == pytest.approx(ref, rel=1e-12, abs=1e-12)
    Qa = Q + np.triu(np.ones((3, 3)), 1) - np.tril(np.ones((3, 3)), -1)  # skew part added
    assert stage_cost(x, u, 0.5 * (Qa + Qa.T), R) == pytest.approx(ref, rel=1e-12, abs=1e-12)


def test_controllability(example_system):
    assert example_system.is_controllable()
    assert not LtiSystem(np.eye(2), [[1.0], [0.0]], np.eye(2), np.zeros((2, 1)),
                         [1, 1]).is_controllable()
    assert EXAMPLE_A[0][0] == 1.0 and EXAMPLE_B[0][0] == 4.798
