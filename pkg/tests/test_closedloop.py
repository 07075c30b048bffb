import itertools

import numpy as np
import pytest

from smpcval.closedloop import (ClosedLoopTrace, SweepError, SweepResult, hull_area, performance_index,
                                rho_grid, select_rho, simulate, simulate_batch, statistics, sweep,
                                terminal_hull, violation_measure)
from smpcval.probval import ProbabilisticLevels
from smpcval.qpcore import QpSettings
from smpcval.smpc import PenaltyController
from smpcval.uncertainty import ScenarioBatch, draw_disturbance_batch


def loop_violation(alpha):
    total = 0.0
    for a in alpha:
        if a > 0:
            total += a
    return total


def test_violation_measure():
    assert violation_measure([1.0, -2.0, 3.0]) == 4.0
    assert violation_measure([-1.0, 0.0, -5.0]) == 0.0
    rng = np.random.default_rng(5)
    for _ in range(200):
        a = rng.normal(size=rng.integers(1, 10))
        assert violation_measure(a) == pytest.approx(loop_violation(a), abs=1e-15)
    batch = rng.normal(size=(4, 7, 6))
    assert np.allclose(violation_measure(batch), [[loop_violation(r) for r in m] for m in batch])


def _trace(states, inputs, sys):
    viol = [violation_measure(sys.C @ x + sys.D @ u - sys.h) for x, u in zip(states, inputs)]
    return ClosedLoopTrace(states=np.asarray(states), inputs=np.asarray(inputs[:-1]),
                           stage_costs=np.zeros(len(states) - 1), violations=np.asarray(viol),
                           terminal_input=np.asarray(inputs[-1]))


def test_performance_index_both_directions(example_system):
    sys = example_system
    inside = _trace([[0.5, 0.5], [1.9, -2.9], [0.0, 0.0]], [[0.1], [-0.2], [0.0]], sys)
    assert performance_index(inside) == 0.0
    # one row exceeded by 0.3
    one = _trace([[0.5, 0.5], [2.3, 0.0], [0.0, 0.0]], [[0.1], [0.0], [0.0]], sys)
    assert performance_index(one) == pytest.approx(0.3, abs=1e-12)
    # the k = M term counts only in the default variant
    last = _trace([[0.0, 0.0], [0.0, 0.0], [0.0, 3.5]], [[0.0], [0.0], [0.0]], sys)
    assert performance_index(last) == pytest.approx(0.5)
    assert performance_index(last, "before-M") == 0.0
    rng = np.random.default_rng(2)
    for _ in range(50):
        states = rng.uniform(-3, 3, size=(6, 2))
        inputs = rng.uniform(-0.3, 0.3, size=(6, 1))
        tr = _trace(states, inputs, sys)
        ref = sum(loop_violation(sys.C @ x + sys.D @ u - sys.h) for x, u in zip(states, inputs))
        assert performance_index(tr) == pytest.approx(ref, abs=1e-12)
        feasible = all(np.all(sys.C @ x + sys.D @ u <= sys.h) for x, u in zip(states, inputs))
        assert (performance_index(tr) == 0.0) == feasible


def test_simulate_zero(example_system, example_design, example_profile):
    ctrl = PenaltyController(example_system, example_design, example_profile, 10.0)
    tr = simulate(np.zeros(2), np.zeros((20, 2)), ctrl, M=20, dt=0.02)
    assert np.abs(tr.states).max() <= 1e-9
    assert np.abs(tr.inputs).max() <= 1e-9
    assert performance_index(tr) == 0.0
    assert tr.M == 20 and tr.states.shape == (21, 2) and tr.dt == 0.02


def test_simulate_reconstructs_dynamics(example_system, example_design, example_profile,
                                        example_model, feasible_states):
    ctrl = PenaltyController(example_system, example_design, example_profile, 100.0)
    d = draw_disturbance_batch(example_model, 20, 5, seed=4)
    for i in range(5):
        tr = simulate(feasible_states[i], d[i], ctrl, M=20, scenario_index=i)
        A, B = example_system.A, example_system.B
        for k in range(20):
            assert np.allclose(tr.states[k + 1], A @ tr.states[k] + B @ tr.inputs[k] + d[i, k],
                               rtol=0, atol=1e-15)
        again = simulate(feasible_states[i], d[i], ctrl, M=20, scenario_index=i)
        assert np.array_equal(tr.states, again.states)


def test_zero_disturbance_contracts(example_system, example_design, example_profile,
                                    feasible_states):
    ctrl = PenaltyController(example_system, example_design, example_profile, 100.0)
    run = simulate_batch(feasible_states, np.zeros((100, 20, 2)), ctrl)
    assert not run.failures
    start = np.linalg.norm(run.states[:, 0], axis=1)
    end = np.linalg.norm(run.states[:, -1], axis=1)
    assert np.all(end < start)


def test_rho_grid():
    g = rho_grid(1.0, 1e6, 100)
    assert g[0] == 1.0 and g[-1] == 1e6
    assert np.all(np.diff(g) > 0)
    ratio = g[1:] / g[:-1]
    assert np.allclose(ratio, ratio[0], rtol=1e-12, atol=0)
    assert rho_grid(1.0, 1e6, 3)[1] == pytest.approx(1e3, rel=1e-12)
    with pytest.raises(ValueError):
        rho_grid(10.0, 1.0, 5)
    with pytest.raises(ValueError):
        rho_grid(1.0, 10.0, 1)


def _result(gamma, grid=None):
    gamma = np.asarray(gamma, dtype=float)
    grid = np.arange(1.0, gamma.size + 1) if grid is None else np.asarray(grid)
    return SweepResult(rho_grid=grid, gamma=gamma, g_avg=gamma, g_max=gamma, xi=gamma * 0,
                       g=np.zeros((1, gamma.size)), S_rho=1,
                       levels=ProbabilisticLevels(0.1, 0.1, 1), batch_seed=0, batch_digest="")


def test_select_rho():
    assert select_rho(_result([2.0, 2.0, 2.0], [1, 10, 100])) == 1.0
    assert select_rho(_result([3.0, 1.0, 2.0], [1, 10, 100])) == 10.0
    assert select_rho(_result([3.0, 1.0, 0.5], [1, 10, 100]), "threshold", 1.0) == 10.0
    assert select_rho(_result([3.0, 1.0, 0.5], [1, 10, 100]), "threshold", 1e9) == 1.0
    with pytest.raises(ValueError, match="0.5"):
        select_rho(_result([3.0, 1.0, 0.5]), "threshold", 0.1)
    with pytest.raises(ValueError):
        select_rho(_result([1.0]), "median")


def test_statistics_oracle():
    rng = np.random.default_rng(9)
    g = np.where(rng.random((50, 4)) < 0.3, rng.exponential(size=(50, 4)), 0.0)
    for r in (1, 3, 7):
        gamma, avg, gmax, xi = statistics(g, r)
        for j in range(4):
            assert gamma[j] == sorted(g[:, j], reverse=True)[r - 1]
            assert gamma[j] <= gmax[j]
            assert xi[j] == np.mean(g[:, j] > 1e-9)
        perm = rng.permutation(50)
        assert np.array_equal(statistics(g[perm], r)[0], gamma)


def test_hull():
    tri = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    h = terminal_hull(tri[[2, 0, 1]])
    assert {tuple(p) for p in h} == {tuple(p) for p in tri}
    assert hull_area(h) == pytest.approx(0.5)
    # counterclockwise: positive signed area
    x, y = h[:, 0], h[:, 1]
    assert np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)) > 0
    assert terminal_hull(np.ones((5, 2))).shape == (1, 2)
    with pytest.raises(ValueError):
        terminal_hull(np.zeros((4, 3)))
    rng = np.random.default_rng(1)
    pts = rng.normal(size=(200, 2))
    areas = [hull_area(terminal_hull(pts[:k])) for k in range(3, 200)]
    assert np.all(np.diff(areas) >= -1e-12)
    # every point lies inside the hull
    h = terminal_hull(pts)
    for a, b in zip(h, np.roll(h, -1, axis=0)):
        cross = (b[0] - a[0]) * (pts[:, 1] - a[1]) - (b[1] - a[1]) * (pts[:, 0] - a[0])
        assert np.all(cross >= -1e-12)


def _batch(states, model, M=10, seed=7, zero=False):
    d = np.zeros((len(states), M, 2)) if zero else draw_disturbance_batch(model, M, len(states),
                                                                         seed=seed)
    return ScenarioBatch(x0=np.asarray(states), disturbances=d, batch_seed=seed)


def test_sweep_zero_disturbance(example_system, example_design, example_profile, example_model,
                                feasible_states):
    # deep inside: scaled toward the origin
    batch = _batch(0.3 * feasible_states[:40], example_model, zero=True)
    res = sweep(example_system, example_design, example_profile, batch, rho_grid(1, 1e6, 4),
                ProbabilisticLevels(0.3, 0.1, 2), enforce_sample_size=False)
    # inputs resting on their bound leave roundoff-level violations only
    assert np.all(res.gamma <= 1e-12) and np.all(res.g_avg <= 1e-12) and np.all(res.xi == 0)


def test_sweep_properties(example_system, example_design, example_profile, example_model,
                          feasible_states):
    batch = _batch(feasible_states[:40], example_model)
    grid = rho_grid(1, 1e4, 3)
    levels = ProbabilisticLevels(0.3, 0.1, 3)
    with pytest.raises(ValueError, match="fewer"):
        sweep(example_system, example_design, example_profile, batch, grid,
              ProbabilisticLevels(0.05, 1e-6, 3))
    res = sweep(example_system, example_design, example_profile, batch, grid, levels,
                enforce_sample_size=False, trace_rhos=[50.0], chunk=16)
    assert np.all(res.gamma <= res.g_max)
    assert np.all((res.xi >= 0) & (res.xi <= 1))
    assert res.levels.multiplicity == 3
    assert res.batch_digest == batch.digest()
    assert set(res.extra) == {50.0} | {float(r) for r in grid}
    # threads only schedule fixed chunks: bit-identical; another chunk size
    # changes BLAS blocking, so only roundoff may differ
    for chunk, threads in itertools.product((16, 7, 40), (1, 3)):
        other = sweep(example_system, example_design, example_profile, batch, grid, levels,
                      enforce_sample_size=False, chunk=chunk, threads=threads)
        if chunk == 16:
            assert np.array_equal(other.g, res.g)
        else:
            assert np.allclose(other.g, res.g, rtol=0, atol=1e-9)
    # the same scenarios are reused for every rho
    x0 = [run.states[:, 0] for run in res.extra.values()]
    assert all(np.array_equal(x, batch.x0) for x in x0)


def test_sweep_failure_aborts(example_system, example_design, example_profile, example_model,
                              feasible_states):
    batch = _batch(feasible_states[:4], example_model)
    with pytest.raises(SweepError) as err:
        sweep(example_system, example_design, example_profile, batch, [1e4, 1e5],
              ProbabilisticLevels(0.3, 0.1, 1), enforce_sample_size=False,
              settings=QpSettings(max_iter=1, polish=False, fallback_after=0))
    assert err.value.failures and {"scenario", "step", "status", "rho"} <= set(err.value.failures[0])
