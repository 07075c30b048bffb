"""Closed-loop simulation, violation index and the penalty-factor sweep.

A scenario ``w = (x0, zeta_0 .. zeta_{M-1})`` is simulated under
``x_{k+1} = A x_k + B kappa(x_k, rho) + zeta_k``. Its violation index is

    g(w, rho) = sum_k [[C x_k + D u_k - h]],   [[a]] = sum_i max(0, a_i)

and ``gamma(rho)`` is the ``r``-th largest ``g`` over one shared batch of
scenarios. Simulations are batched: every time step of a chunk of scenarios
is one batched QP solve, warm-started from the previous step.
"""
from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .probval import ProbabilisticLevels, generalized_max_columns, sample_complexity
from .qpcore import OPTIMAL, QpSettings, DEFAULT_SETTINGS, WarmStart
from .smpc import PenaltyController
from .sysmodel import closed_loop_matrix
from .uncertainty import ScenarioBatch

log = logging.getLogger(__name__)

# a trajectory counts as violating when g exceeds this
VIOLATION_ZERO = 1e-9
G_SUM_VARIANTS = ("through-M", "before-M")
DEFAULT_CHUNK = 512


class SweepError(RuntimeError):
    """Some scenario could not be simulated; the sweep admits no censoring."""

    def __init__(self, message: str, failures: list):
        super().__init__(message)
        self.failures = failures


def violation_measure(alpha) -> np.ndarray | float:
    """``sum_i max(0, alpha_i)`` over the last axis."""
    a = np.asarray(alpha, dtype=float)
    out = np.clip(a, 0.0, None).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


@dataclass
class ClosedLoopTrace:
    states: np.ndarray          # (M+1, n_x)
    inputs: np.ndarray          # (M, n_u)
    stage_costs: np.ndarray     # (M,)
    violations: np.ndarray      # (M+1,) step violation, last one uses terminal_input
    scenario_index: int = 0
    rho: float = float("nan")
    terminal_input: np.ndarray | None = None
    dt: float | None = None

    @property
    def M(self) -> int:
        return self.inputs.shape[0]


@dataclass
class BatchTrajectories:
    """Closed-loop trajectories of a chunk of scenarios under one ``rho``."""

    states: np.ndarray          # (S, M+1, n_x)
    inputs: np.ndarray          # (S, M+1, n_u); the last column is computed, not applied
    violations: np.ndarray      # (S, M+1)
    stage_costs: np.ndarray     # (S, M)
    rho: float
    first_index: int = 0
    failures: list = field(default_factory=list)
    iterations: int = 0

    def g(self, variant: str = "through-M") -> np.ndarray:
        if variant not in G_SUM_VARIANTS:
            raise ValueError(f"g variant must be one of {G_SUM_VARIANTS}")
        v = self.violations if variant == "through-M" else self.violations[:, :-1]
        return v.sum(axis=1)

    def trace(self, i: int, dt: float | None = None) -> ClosedLoopTrace:
        return ClosedLoopTrace(states=self.states[i], inputs=self.inputs[i, :-1],
                               stage_costs=self.stage_costs[i], violations=self.violations[i],
                               scenario_index=self.first_index + i, rho=self.rho,
                               terminal_input=self.inputs[i, -1], dt=dt)


def _shift_warm(controller: PenaltyController, sol) -> WarmStart:
    """Previous optimum shifted one step ahead; the tail follows the ancillary law."""
    lay = controller.layout
    N, n_x, n_u = lay.N, lay.n_x, lay.n_u
    A_K = closed_loop_matrix(controller.sys, controller.design.K)
    y = sol.y.copy()
    z = sol.y[:, : N * n_x].reshape(-1, N, n_x)
    v = sol.y[:, N * n_x: N * (n_x + n_u)].reshape(-1, N, n_u)
    z_new = np.concatenate([z[:, 1:], (z[:, -1] @ A_K.T + v[:, -1] @ controller.sys.B.T)[:, None]], 1)
    v_new = np.concatenate([v[:, 1:], np.zeros_like(v[:, :1])], 1)
    y[:, : N * n_x] = z_new.reshape(len(y), -1)
    y[:, N * n_x: N * (n_x + n_u)] = v_new.reshape(len(y), -1)
    return WarmStart(y=y, mu=sol.mu, rho=sol.rho)


def simulate_batch(x0, disturbances, controller: PenaltyController,
                   first_index: int = 0) -> BatchTrajectories:
    """Simulate every row of ``x0`` with its disturbance sequence.

    ``disturbances`` has shape ``(S, M, n_x)``. The input at ``x_M`` is
    evaluated (for the ``k = M`` term of ``g``) but not applied. A scenario
    whose QP fails is recorded in ``failures`` and its remaining states are
    NaN.
    """
    sys = controller.sys
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    d = np.asarray(disturbances, dtype=float)
    if d.ndim == 2:
        d = d[None]
    S, M = d.shape[0], d.shape[1]
    if x0.shape != (S, sys.n_x) or d.shape[2] != sys.n_x:
        raise ValueError(f"x0 {x0.shape} and disturbances {d.shape} do not agree")
    states = np.full((S, M + 1, sys.n_x), np.nan)
    inputs = np.full((S, M + 1, sys.n_u), np.nan)
    states[:, 0] = x0
    alive = np.arange(S)
    failures = []
    warm = None
    total_it = 0
    for k in range(M + 1):
        X = states[alive, k]
        sol = controller.solve_batch(X, warm)
        total_it += int(sol.iterations.sum())
        ok = sol.status == OPTIMAL
        for j in np.flatnonzero(~ok):
            failures.append({"scenario": int(first_index + alive[j]), "step": k,
                             "status": str(sol.status[j]), "rho": controller.rho,
                             "iterations": int(sol.iterations[j])})
        u = controller.inputs_from(X, sol)
        inputs[alive[ok], k] = u[ok]
        if k < M:
            states[alive[ok], k + 1] = (X[ok] @ sys.A.T + u[ok] @ sys.B.T + d[alive[ok], k])
        if not ok.all():
            alive = alive[ok]
            sol = sol.subset(ok)
        warm = _shift_warm(controller, sol) if alive.size else None
        if not alive.size:
            break
    Cx = np.einsum("hj,skj->skh", sys.C, states) + np.einsum("hj,skj->skh", sys.D, inputs)
    violations = violation_measure(Cx - sys.h)
    costs = np.einsum("ski,ij,skj->sk", states[:, :-1], controller.design.Q, states[:, :-1]) + \
        np.einsum("ski,ij,skj->sk", inputs[:, :-1], controller.design.R, inputs[:, :-1])
    return BatchTrajectories(states=states, inputs=inputs, violations=violations,
                             stage_costs=costs, rho=controller.rho, first_index=first_index,
                             failures=failures, iterations=total_it)


def simulate(x0, disturbances, controller: PenaltyController, M: int | None = None,
             scenario_index: int = 0, dt: float | None = None) -> ClosedLoopTrace:
    """One closed-loop trajectory; ``disturbances`` holds ``zeta_0 .. zeta_{M-1}``.

    Raises :class:`SweepError` with a tagged failure record if a QP fails.
    """
    d = np.atleast_2d(np.asarray(disturbances, dtype=float))
    if M is not None:
        if d.shape[0] < M:
            raise ValueError(f"need {M} disturbance vectors, got {d.shape[0]}")
        d = d[:M]
    batch = simulate_batch(np.asarray(x0, dtype=float)[None], d[None], controller,
                           first_index=scenario_index)
    if batch.failures:
        raise SweepError(f"scenario {scenario_index} failed at step {batch.failures[0]['step']}",
                         batch.failures)
    return batch.trace(0, dt=dt)


def performance_index(trace: ClosedLoopTrace, variant: str = "through-M") -> float:
    """``g`` of one trace; ``before-M`` drops the ``k = M`` term."""
    if variant not in G_SUM_VARIANTS:
        raise ValueError(f"g variant must be one of {G_SUM_VARIANTS}")
    v = trace.violations if variant == "through-M" else trace.violations[:-1]
    return float(np.sum(v))


def rho_grid(rho_min: float, rho_max: float, n_C: int) -> np.ndarray:
    """``n_C`` points equidistant in log scale from ``rho_min`` to ``rho_max``."""
    if not 0.0 < rho_min < rho_max:
        raise ValueError(f"need 0 < rho_min < rho_max, got {rho_min}, {rho_max}")
    if int(n_C) != n_C or n_C < 2:
        raise ValueError(f"n_C must be an integer >= 2, got {n_C}")
    l = np.arange(n_C)
    grid = rho_min * np.exp(l / (n_C - 1) * np.log(rho_max / rho_min))
    grid[0], grid[-1] = rho_min, rho_max
    return grid


@dataclass
class SweepResult:
    rho_grid: np.ndarray
    gamma: np.ndarray
    g_avg: np.ndarray
    g_max: np.ndarray
    xi: np.ndarray
    g: np.ndarray                       # (S_rho, n_C)
    S_rho: int
    levels: ProbabilisticLevels
    batch_seed: int
    batch_digest: str
    variant: str = "through-M"
    extra: dict = field(default_factory=dict)   # rho -> BatchTrajectories for traced values

    def to_dict(self) -> dict:
        return {"rho_grid": self.rho_grid.tolist(), "gamma": self.gamma.tolist(),
                "g_avg": self.g_avg.tolist(), "g_max": self.g_max.tolist(),
                "xi": self.xi.tolist(), "S_rho": int(self.S_rho),
                "levels": self.levels.to_dict(), "batch_seed": int(self.batch_seed),
                "batch_digest": self.batch_digest, "g_variant": self.variant}


def statistics(g: np.ndarray, r: int):
    """Per-column ``gamma``, mean, max and violating fraction of a ``(S, n)`` array."""
    g = np.asarray(g, dtype=float)
    return (generalized_max_columns(g, r), g.mean(axis=0), g.max(axis=0),
            np.mean(g > VIOLATION_ZERO, axis=0))


def _run_chunks(make_controller, rhos, batch: ScenarioBatch, chunk: int, threads: int):
    """Simulate all ``(rho, chunk)`` pairs; results keyed so order never matters."""
    S = len(batch)
    starts = list(range(0, S, chunk))
    tasks = [(i, s) for i in range(len(rhos)) for s in starts]

    def work(task):
        i, s = task
        ctrl = make_controller(rhos[i])
        sl = slice(s, min(s + chunk, S))
        return task, simulate_batch(batch.x0[sl], batch.disturbances[sl], ctrl, first_index=s)

    if threads == 0:
        threads = os.cpu_count() or 1
    if threads > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            done = dict(pool.map(work, tasks))
    else:
        done = dict(work(t) for t in tasks)
    out = []
    for i in range(len(rhos)):
        parts = [done[(i, s)] for s in starts]
        merged = BatchTrajectories(
            states=np.concatenate([p.states for p in parts]),
            inputs=np.concatenate([p.inputs for p in parts]),
            violations=np.concatenate([p.violations for p in parts]),
            stage_costs=np.concatenate([p.stage_costs for p in parts]),
            rho=float(rhos[i]), failures=[f for p in parts for f in p.failures],
            iterations=sum(p.iterations for p in parts))
        out.append(merged)
    return out


def sweep(sys, design, profile, batch: ScenarioBatch, grid, levels: ProbabilisticLevels,
          slack_mode: str = "shared", variant: str = "through-M", trace_rhos=(),
          threads: int = 1, chunk: int = DEFAULT_CHUNK,
          settings: QpSettings = DEFAULT_SETTINGS, enforce_sample_size: bool = True) -> SweepResult:
    """Evaluate every ``rho`` of ``grid`` on the same scenario batch.

    ``levels.multiplicity`` is forced to ``len(grid)``. ``trace_rhos`` are
    extra values simulated on the same batch and returned in ``extra`` (they
    do not enter the grid statistics). ``threads`` only schedules the fixed
    chunks, so results do not depend on it.
    """
    grid = np.asarray(grid, dtype=float)
    if variant not in G_SUM_VARIANTS:
        raise ValueError(f"g variant must be one of {G_SUM_VARIANTS}")
    levels = ProbabilisticLevels(levels.epsilon, levels.delta, levels.r, multiplicity=grid.size)
    S = len(batch)
    need = sample_complexity(levels)
    if enforce_sample_size and S < need:
        raise ValueError(f"{S} scenarios are fewer than the required {need}")
    if levels.r > S:
        raise ValueError(f"discarding parameter r={levels.r} exceeds the batch size {S}")

    def make(rho):
        return PenaltyController(sys, design, profile, rho, slack_mode=slack_mode, settings=settings)

    extra_rhos = [float(r) for r in trace_rhos]
    runs = _run_chunks(make, list(grid) + extra_rhos, batch, chunk, threads)
    failures = [f for run in runs for f in run.failures]
    if failures:
        raise SweepError(f"{len(failures)} scenario evaluation(s) failed; first: {failures[0]}",
                         failures)
    g = np.column_stack([run.g(variant) for run in runs[: grid.size]])
    gamma, g_avg, g_max, xi = statistics(g, levels.r)
    extra = {rho: run for rho, run in zip(extra_rhos, runs[grid.size:])}
    # grid members are also available as traces
    for rho, run in zip(grid, runs[: grid.size]):
        extra.setdefault(float(rho), run)
    return SweepResult(rho_grid=grid, gamma=gamma, g_avg=g_avg, g_max=g_max, xi=xi, g=g,
                       S_rho=S, levels=levels, batch_seed=batch.batch_seed,
                       batch_digest=batch.digest(), variant=variant, extra=extra)


def select_rho(result: SweepResult, policy: str = "min-gamma", threshold: float | None = None) -> float:
    """Pick a grid value: the smallest minimiser of ``gamma``, or the smallest
    ``rho`` with ``gamma <= threshold``."""
    gamma = np.asarray(result.gamma, dtype=float)
    grid = np.asarray(result.rho_grid, dtype=float)
    order = np.argsort(grid, kind="stable")
    gamma, grid = gamma[order], grid[order]
    if policy == "min-gamma":
        return float(grid[int(np.argmin(gamma))])
    if policy == "threshold":
        if threshold is None:
            raise ValueError("threshold policy needs a threshold")
        hits = np.flatnonzero(gamma <= threshold)
        if not hits.size:
            raise ValueError(f"no rho reaches gamma <= {threshold}; smallest gamma is "
                             f"{gamma.min():.6g} at rho={grid[int(np.argmin(gamma))]:.6g}")
        return float(grid[hits[0]])
    raise ValueError(f"unknown policy {policy!r}; use 'min-gamma' or 'threshold'")


def _cross(o, a, b) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def terminal_hull(points) -> np.ndarray:
    """Convex hull of planar points, counterclockwise, by Andrew's monotone chain."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"terminal hull needs planar points (n_x = 2), got shape {pts.shape}")
    pts = pts[np.all(np.isfinite(pts), axis=1)]
    uniq = sorted(set(map(tuple, pts.tolist())))
    if len(uniq) <= 2:
        return np.array(uniq, dtype=float).reshape(-1, 2)
    lower, upper = [], []
    for p in uniq:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(uniq):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=float)


def hull_area(vertices) -> float:
    """Shoelace area of a polygon given in order."""
    v = np.asarray(vertices, dtype=float)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
