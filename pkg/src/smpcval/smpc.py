"""Finite-horizon problems of the stochastic MPC law and the resulting control law.

Decision vector layout (``n = N n_x + N n_u + n_eta``)::

    y = [z_0, ..., z_{N-1}, v_0, ..., v_{N-1}, eta]

``z`` are nominal states, ``v`` the corrections on top of the ancillary
feedback (``u = v + K x``) and ``eta`` the slack of the penalty problem:
``n_h`` entries shared by all steps (``slack_mode="shared"``) or ``n_h``
per step (``slack_mode="per_step"``).

All problems are affine in the measured state ``x``: the matrices are built
once per controller and only ``b_eq`` and ``b_in`` depend on ``x``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .qpcore import (OPTIMAL, BatchSolver, QpBatchSolution, QpProblem, QpSettings,
                     DEFAULT_SETTINGS, WarmStart)
from .sysmodel import ControllerDesign, LtiSystem, closed_loop_matrix
from .tightening import TighteningProfile

SLACK_MODES = ("shared", "per_step")


class ControllerError(RuntimeError):
    """The control law could not be evaluated; carries solver diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class QpTemplate:
    """QP whose right-hand sides are affine in the state ``x``.

    ``b_eq = E_x x`` and ``b_in = b_in0 + F_x x``.
    """

    H: np.ndarray
    f: np.ndarray
    G_eq: np.ndarray
    E_x: np.ndarray
    G_in: np.ndarray
    b_in0: np.ndarray
    F_x: np.ndarray

    def vectors(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        return (np.broadcast_to(self.f, (X.shape[0], self.f.size)),
                X @ self.E_x.T, self.b_in0[None, :] + X @ self.F_x.T)

    def instance(self, x) -> QpProblem:
        f, b_eq, b_in = self.vectors(x)
        return QpProblem(self.H, f[0], self.G_eq, b_eq[0], self.G_in, b_in[0])


@dataclass
class HorizonDecision:
    z: np.ndarray    # (N, n_x)
    v: np.ndarray    # (N, n_u)
    eta: np.ndarray  # (n_h,) or (N, n_h); empty for problems without slack

    @property
    def first_input_correction(self) -> np.ndarray:
        return self.v[0]


class Layout:
    """Index bookkeeping for the stacked decision vector."""

    def __init__(self, n_x: int, n_u: int, N: int, n_eta: int = 0):
        self.n_x, self.n_u, self.N, self.n_eta = n_x, n_u, N, n_eta
        self.nz = N * n_x
        self.nv = N * n_u
        self.n = self.nz + self.nv + n_eta

    def z(self, l: int) -> slice:
        return slice(l * self.n_x, (l + 1) * self.n_x)

    def v(self, l: int) -> slice:
        return slice(self.nz + l * self.n_u, self.nz + (l + 1) * self.n_u)

    @property
    def eta(self) -> slice:
        return slice(self.nz + self.nv, self.n)

    def select(self, part: slice) -> np.ndarray:
        S = np.zeros((part.stop - part.start, self.n))
        S[:, part] = np.eye(part.stop - part.start)
        return S

    def unpack(self, y, eta_shape=None) -> HorizonDecision:
        y = np.asarray(y, dtype=float)
        z = y[: self.nz].reshape(self.N, self.n_x)
        v = y[self.nz: self.nz + self.nv].reshape(self.N, self.n_u)
        eta = y[self.eta]
        if eta_shape is not None:
            eta = eta.reshape(eta_shape)
        return HorizonDecision(z=z, v=v, eta=eta)


def build_cost(sys: LtiSystem, design: ControllerDesign, n_eta: int = 0) -> np.ndarray:
    """Hessian ``H`` with ``1/2 y'Hy = J(z, v)``.

    ``J = sum_l |z_l|_Q^2 + |K z_l + v_l|_R^2 + |x_N|_P^2`` with the terminal
    state written out as ``x_N = A_K z_{N-1} + B v_{N-1}``.
    """
    lay = Layout(sys.n_x, sys.n_u, design.N, n_eta)
    A_K = closed_loop_matrix(sys, design.K)
    M = np.zeros((lay.n, lay.n))
    for l in range(design.N):
        Sz = lay.select(lay.z(l))
        Su = design.K @ Sz + lay.select(lay.v(l))
        M += Sz.T @ design.Q @ Sz + Su.T @ design.R @ Su
    Sx_N = A_K @ lay.select(lay.z(design.N - 1)) + sys.B @ lay.select(lay.v(design.N - 1))
    M += Sx_N.T @ design.P @ Sx_N
    return M + M.T


def _dynamics_equalities(sys: LtiSystem, design: ControllerDesign, lay: Layout):
    """Rows for ``z_0 = x``, nominal dynamics and the terminal equilibrium."""
    n_x, N = sys.n_x, design.N
    A_K = closed_loop_matrix(sys, design.K)
    rows = N * n_x + n_x
    G = np.zeros((rows, lay.n))
    E = np.zeros((rows, n_x))
    G[:n_x, lay.z(0)] = np.eye(n_x)
    E[:n_x] = np.eye(n_x)
    r = n_x
    for l in range(N - 1):
        G[r:r + n_x, lay.z(l + 1)] = np.eye(n_x)
        G[r:r + n_x, lay.z(l)] = -A_K
        G[r:r + n_x, lay.v(l)] = -sys.B
        r += n_x
    G[r:r + n_x, lay.z(N - 1)] = A_K - np.eye(n_x)
    G[r:r + n_x, lay.v(N - 1)] = sys.B
    r += n_x
    return G[:r], E[:r]


def _tightened_rows(sys: LtiSystem, design: ControllerDesign, profile: TighteningProfile, lay: Layout):
    """``C_K z_l + D v_l <= h - q_l`` for every step."""
    n_h, N = sys.n_h, design.N
    G = np.zeros((N * n_h, lay.n))
    b = np.zeros(N * n_h)
    for l in range(N):
        rows = slice(l * n_h, (l + 1) * n_h)
        G[rows, lay.z(l)] = design.C_K
        G[rows, lay.v(l)] = sys.D
        b[rows] = sys.h - profile.q[l]
    return G, b


def _check_profile(design: ControllerDesign, profile: TighteningProfile, sys: LtiSystem):
    if profile.q.shape != (design.N, sys.n_h):
        raise ValueError(f"tightening profile has shape {profile.q.shape}, "
                         f"expected ({design.N}, {sys.n_h})")


def tightened_template(sys: LtiSystem, design: ControllerDesign,
                       profile: TighteningProfile) -> QpTemplate:
    _check_profile(design, profile, sys)
    lay = Layout(sys.n_x, sys.n_u, design.N)
    G_eq, E_x = _dynamics_equalities(sys, design, lay)
    G_in, b_in = _tightened_rows(sys, design, profile, lay)
    return QpTemplate(H=build_cost(sys, design), f=np.zeros(lay.n), G_eq=G_eq, E_x=E_x,
                      G_in=G_in, b_in0=b_in, F_x=np.zeros((G_in.shape[0], sys.n_x)))


def build_tightened_problem(x, sys: LtiSystem, design: ControllerDesign,
                            profile: TighteningProfile) -> QpProblem:
    """Tightened-constraint problem at state ``x``; the nominal problem is ``q = 0``."""
    return tightened_template(sys, design, profile).instance(x)


def input_rows_from_system(sys: LtiSystem):
    """Rows of ``C x + D u <= h`` that involve only the input."""
    pure = np.all(sys.C == 0, axis=1) & np.any(sys.D != 0, axis=1)
    if not np.any(pure):
        raise ValueError("system has no input-only constraint rows; pass input_set explicitly")
    return sys.D[pure].copy(), sys.h[pure].copy()


def penalty_template(sys: LtiSystem, design: ControllerDesign, profile: TighteningProfile,
                     rho: float, input_set=None, slack_mode: str = "shared") -> QpTemplate:
    """Slack form of the penalty problem.

    Cost ``J + rho * sum(eta)``; soft rows ``C_K z_l + D v_l - eta <= h - q_l``,
    ``eta >= 0`` and the hard first-input rows ``H_U (v_0 + K x) <= h_U``.
    """
    if not rho > 0:
        raise ValueError(f"penalty factor must be positive, got {rho}")
    if slack_mode not in SLACK_MODES:
        raise ValueError(f"slack_mode must be one of {SLACK_MODES}, got {slack_mode!r}")
    _check_profile(design, profile, sys)
    n_h, N = sys.n_h, design.N
    n_eta = n_h if slack_mode == "shared" else N * n_h
    lay = Layout(sys.n_x, sys.n_u, N, n_eta)
    H_U, h_U = input_rows_from_system(sys) if input_set is None else (
        np.atleast_2d(np.asarray(input_set[0], dtype=float)),
        np.asarray(input_set[1], dtype=float).reshape(-1))

    G_eq, E_x = _dynamics_equalities(sys, design, lay)
    soft, b_soft = _tightened_rows(sys, design, profile, lay)
    if slack_mode == "shared":
        for l in range(N):
            soft[l * n_h:(l + 1) * n_h, lay.eta] = -np.eye(n_h)
    else:
        soft[:, lay.eta] = -np.eye(N * n_h)
    nonneg = np.zeros((n_eta, lay.n))
    nonneg[:, lay.eta] = -np.eye(n_eta)
    first = np.zeros((H_U.shape[0], lay.n))
    first[:, lay.v(0)] = H_U
    G_in = np.vstack([soft, nonneg, first])
    b_in0 = np.concatenate([b_soft, np.zeros(n_eta), h_U])
    F_x = np.zeros((G_in.shape[0], sys.n_x))
    F_x[-H_U.shape[0]:] = -H_U @ design.K
    f = np.zeros(lay.n)
    f[lay.eta] = rho
    return QpTemplate(H=build_cost(sys, design, n_eta), f=f, G_eq=G_eq, E_x=E_x,
                      G_in=G_in, b_in0=b_in0, F_x=F_x)


def build_penalty_problem(x, controller: "PenaltyController") -> QpProblem:
    return controller.template.instance(x)


class PenaltyController:
    """Receding-horizon law ``u = v*_0 + K x`` of the penalty problem.

    The underlying QP matrices and their factorizations are built once;
    evaluating the law at many states is a single batched solve.
    """

    def __init__(self, sys: LtiSystem, design: ControllerDesign, profile: TighteningProfile,
                 rho: float, input_set=None, slack_mode: str = "shared",
                 settings: QpSettings = DEFAULT_SETTINGS):
        if not sys.is_controllable():
            raise ValueError("(A, B) must be controllable for the penalty problem to be always feasible")
        if design.N < sys.n_x:
            raise ValueError(f"horizon N={design.N} must be at least n_x={sys.n_x}")
        self.sys, self.design, self.profile = sys, design, profile
        self.rho = float(rho)
        self.slack_mode = slack_mode
        self.template = penalty_template(sys, design, profile, rho, input_set, slack_mode)
        n_eta = sys.n_h if slack_mode == "shared" else design.N * sys.n_h
        self.layout = Layout(sys.n_x, sys.n_u, design.N, n_eta)
        self.eta_shape = (sys.n_h,) if slack_mode == "shared" else (design.N, sys.n_h)
        self.settings = settings
        t = self.template
        self._solver = BatchSolver(t.H, t.G_eq, t.G_in, settings, f_hint=t.f)

    def provenance(self) -> dict:
        return {"rho": self.rho, "K": self.design.K.tolist(), "P": self.design.P.tolist(),
                "profile_hash": self.profile.digest(), "slack_mode": self.slack_mode}

    def solve_batch(self, X, warm_start: WarmStart | None = None) -> QpBatchSolution:
        f, b_eq, b_in = self.template.vectors(X)
        return self._solver.solve(f, b_eq, b_in, warm_start)

    def inputs_from(self, X, sol: QpBatchSolution) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        v0 = sol.y[:, self.layout.v(0)]
        return v0 + X @ self.design.K.T

    def kappa_batch(self, X, warm_start: WarmStart | None = None):
        """Inputs for every row of ``X`` plus the raw batch solution.

        Raises :class:`ControllerError` if any solve is not optimal.
        """
        sol = self.solve_batch(X, warm_start)
        if not sol.all_optimal:
            bad = np.flatnonzero(sol.status != OPTIMAL)
            raise ControllerError(
                f"penalty problem not solved for {bad.size} state(s)",
                {"indices": bad.tolist(), "status": sol.status[bad].tolist(),
                 "iterations": sol.iterations[bad].tolist(), "rho": self.rho})
        return self.inputs_from(X, sol), sol

    def decision(self, sol: QpBatchSolution, i: int = 0) -> HorizonDecision:
        return self.layout.unpack(sol.y[i], self.eta_shape)


def kappa(x, controller: PenaltyController) -> np.ndarray:
    """Control input ``u = v*_0 + K x`` at state ``x``."""
    u, _ = controller.kappa_batch(np.asarray(x, dtype=float).reshape(1, -1))
    return u[0]
