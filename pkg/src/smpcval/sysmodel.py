"""LTI plant, constraint polytope, stage cost and Riccati machinery.

Gain convention: every gain in this package is applied as ``u = K x``
(positive feedback form). Most LQR references return the gain for
``u = -K x``; :func:`solve_dlqr` already includes the minus sign, so the
gain it returns can be added to ``A`` via ``B @ K`` directly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DimensionError(ValueError):
    """Raised when two operands have incompatible shapes."""

    def __init__(self, first: str, second: str, detail: str):
        self.pair = (first, second)
        super().__init__(f"dimension mismatch between {first} and {second}: {detail}")


class RiccatiError(RuntimeError):
    """Raised when a Riccati fixed-point iteration fails to converge."""


def _as_matrix(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float, ndmin=2)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


def _as_vector(value, name: str) -> np.ndarray:
    arr = np.array(value, dtype=float).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class LtiSystem:
    """``x+ = A x + B u + w`` subject to ``C x + D u <= h``."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        B = _as_matrix(self.B, "B")
        C = _as_matrix(self.C, "C")
        D = _as_matrix(self.D, "D")
        h = _as_vector(self.h, "h")
        if A.shape[0] != A.shape[1]:
            raise DimensionError("A", "A", f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise DimensionError("A", "B", f"{A.shape} vs {B.shape}")
        if C.shape[1] != A.shape[0]:
            raise DimensionError("A", "C", f"C needs {A.shape[0]} columns, got {C.shape}")
        if D.shape[1] != B.shape[1]:
            raise DimensionError("B", "D", f"D needs {B.shape[1]} columns, got {D.shape}")
        if D.shape[0] != C.shape[0]:
            raise DimensionError("C", "D", f"{C.shape} vs {D.shape}")
        if h.shape[0] != C.shape[0]:
            raise DimensionError("C", "h", f"{C.shape[0]} rows vs {h.shape[0]} entries")
        if min(A.shape[0], B.shape[1], C.shape[0]) < 1:
            raise ValueError("n_x, n_u and n_h must all be at least 1")
        if not np.all(h > 0):
            raise ValueError("h must be strictly positive so the origin is interior")
        for name, arr in zip("ABCDh", (A, B, C, D, h)):
            object.__setattr__(self, name, arr)

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B.shape[1]

    @property
    def n_h(self) -> int:
        return self.C.shape[0]

    @classmethod
    def from_boxes(cls, A, B, state_box, input_box) -> "LtiSystem":
        """Build the system with ``|x_i| <= state_box[i]``, ``|u_j| <= input_box[j]``.

        Rows come out as ``+x_1, -x_1, +x_2, -x_2, ..., +u_1, -u_1, ...``.
        """
        A = _as_matrix(A, "A")
        B = _as_matrix(B, "B")
        C, D, h = box_rows(state_box, input_box)
        return cls(A, B, C, D, h)

    def is_controllable(self, tol: float = 1e-9) -> bool:
        blocks = [self.B]
        for _ in range(self.n_x - 1):
            blocks.append(self.A @ blocks[-1])
        return np.linalg.matrix_rank(np.hstack(blocks), tol=tol) == self.n_x


def box_rows(state_box, input_box):
    """Expand symmetric state and input bounds into ``(C, D, h)`` rows."""
    xs = np.asarray(state_box, dtype=float).reshape(-1)
    us = np.asarray(input_box, dtype=float).reshape(-1)
    n_x, n_u = xs.size, us.size
    n_h = 2 * (n_x + n_u)
    C = np.zeros((n_h, n_x))
    D = np.zeros((n_h, n_u))
    h = np.zeros(n_h)
    row = 0
    for i, bound in enumerate(xs):
        C[row, i], C[row + 1, i] = 1.0, -1.0
        h[row:row + 2] = bound
        row += 2
    for j, bound in enumerate(us):
        D[row, j], D[row + 1, j] = 1.0, -1.0
        h[row:row + 2] = bound
        row += 2
    return C, D, h


@dataclass(frozen=True)
class ControllerDesign:
    """Weights, ancillary gain ``K`` (``u = v + K x``) and terminal weight."""

    Q: np.ndarray
    R: np.ndarray
    K: np.ndarray
    P: np.ndarray
    N: int
    C_K: np.ndarray = field(repr=False)

    @classmethod
    def from_system(cls, sys: LtiSystem, Q, R, N: int, K=None) -> "ControllerDesign":
        """DLQR gain unless ``K`` is given, then the matching terminal weight."""
        Q = _as_matrix(Q, "Q")
        R = _as_matrix(R, "R")
        if Q.shape != (sys.n_x, sys.n_x):
            raise DimensionError("Q", "A", f"Q must be {sys.n_x}x{sys.n_x}, got {Q.shape}")
        if R.shape != (sys.n_u, sys.n_u):
            raise DimensionError("R", "B", f"R must be {sys.n_u}x{sys.n_u}, got {R.shape}")
        if int(N) < 1:
            raise ValueError("horizon N must be a positive integer")
        if K is None:
            K, _ = solve_dlqr(sys.A, sys.B, Q, R)
        K = _as_matrix(K, "K")
        A_K = closed_loop_matrix(sys, K)
        if spectral_radius(A_K) >= 1.0:
            raise ValueError("K does not stabilize (A, B): spectral radius of A + BK >= 1")
        P = solve_riccati_for_P(A_K, Q, R, K)
        C_K = sys.C + sys.D @ K
        C_K.setflags(write=False)
        return cls(Q=Q, R=R, K=K, P=P, N=int(N), C_K=C_K)


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(np.asarray(M, dtype=float)))))


def closed_loop_matrix(sys: LtiSystem, K) -> np.ndarray:
    """Return ``A + B K``."""
    K = np.asarray(K, dtype=float)
    if K.ndim != 2 or K.shape != (sys.n_u, sys.n_x):
        raise DimensionError("B", "K", f"K must be {sys.n_u}x{sys.n_x}, got {K.shape}")
    return sys.A + sys.B @ K


# iterates beyond this are treated as divergent
DIVERGED = 1e100


def _norm(M) -> float:
    return float(np.linalg.norm(M, np.inf))


def riccati_residual(A_K, Q, R, K, P) -> float:
    """Frobenius norm of ``Q + K'RK + A_K' P A_K - P``."""
    A_K, Q, R, K, P = (np.asarray(m, dtype=float) for m in (A_K, Q, R, K, P))
    return float(np.linalg.norm(Q + K.T @ R @ K + A_K.T @ P @ A_K - P, "fro"))


def solve_riccati_for_P(A_K, Q, R, K, tol: float = 1e-12, max_iter: int = 100_000) -> np.ndarray:
    """Terminal weight for a fixed stabilizing gain.

    Iterates ``P <- Q + K'RK + A_K' P A_K`` from ``P = 0``. The iteration is a
    contraction whenever ``A_K`` is Schur stable, so failure to converge
    means ``A_K`` is not.
    """
    A_K = np.asarray(A_K, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    K = np.asarray(K, dtype=float)
    if A_K.shape != Q.shape:
        raise DimensionError("A_K", "Q", f"{A_K.shape} vs {Q.shape}")
    if K.shape != (R.shape[0], A_K.shape[0]):
        raise DimensionError("K", "R", f"{K.shape} vs {R.shape}")
    W = Q + K.T @ R @ K
    P = np.zeros_like(A_K)
    for _ in range(max_iter):
        P_next = W + A_K.T @ P @ A_K
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or _norm(P_next) > DIVERGED:
            break
        # max-row-sum norm: no squaring, so no overflow before P itself overflows
        if _norm(P_next - P) < tol * max(1.0, _norm(P_next)):
            P_next.setflags(write=False)
            return P_next
        P = P_next
    raise RiccatiError("Lyapunov iteration did not converge; A_K is probably not Schur stable")


def solve_dlqr(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100_000):
    """Infinite-horizon discrete LQR by Riccati value iteration.

    Returns ``(K, P)`` with ``K`` in the ``u = K x`` convention and ``P`` the
    stabilizing solution of the discrete algebraic Riccati equation.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if B.shape[0] != A.shape[0]:
        raise DimensionError("A", "B", f"{A.shape} vs {B.shape}")
    P = Q.copy()
    for _ in range(max_iter):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        P_next = Q + A.T @ P @ A + A.T @ P @ B @ K
        P_next = 0.5 * (P_next + P_next.T)
        if not np.all(np.isfinite(P_next)) or _norm(P_next) > DIVERGED:
            break
        # max-row-sum norm: no squaring, so no overflow before P itself overflows
        if _norm(P_next - P) < tol * max(1.0, _norm(P_next)):
            K = -np.linalg.solve(R + B.T @ P_next @ B, B.T @ P_next @ A)
            return K, P_next
        P = P_next
    raise RiccatiError("Riccati recursion did not converge; (A, B) may not be stabilizable")


def stage_cost(x, u, Q, R) -> float:
    """``x'Qx + u'Ru``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if Q.shape != (x.size, x.size):
        raise DimensionError("x", "Q", f"{x.size} vs {Q.shape}")
    if R.shape != (u.size, u.size):
        raise DimensionError("u", "R", f"{u.size} vs {R.shape}")
    return float(x @ Q @ x + u @ R @ u)
