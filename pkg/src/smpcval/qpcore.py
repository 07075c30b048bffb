"""Dense convex QP solver based on operator splitting (ADMM).

Solves ``min 1/2 y'Hy + f'y  s.t.  G_eq y = b_eq,  G_in y <= b_in`` with
``H`` positive semidefinite.

The equalities are eliminated exactly through a nullspace basis,
``y = y_p + Z t``, which leaves an inequality-only problem in ``t``. That
problem is equilibrated (Ruiz), solved with an over-relaxed ADMM iteration
whose penalty is rebalanced every few iterations, and finally polished by
solving the KKT system of the detected active set.

Everything is vectorized over a *batch* of problems that share ``H``,
``G_eq`` and ``G_in`` but have their own ``f``, ``b_eq`` and ``b_in``: this
is exactly the structure of an MPC law evaluated at many states. Each
problem keeps its own penalty, iterates and stopping decision, so a batched
solve returns the same answer as solving the problems one at a time.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, fields

import numpy as np
import scipy.linalg as sla
from scipy.optimize import linprog, nnls

log = logging.getLogger(__name__)

OPTIMAL = "optimal"
PRIMAL_INFEASIBLE = "primal-infeasible"
MAX_ITERATIONS = "max-iterations"


@dataclass(frozen=True)
class QpSettings:
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adapt_every: int = 25
    adapt_tolerance: float = 5.0
    adapt_window: int = 500
    check_every: int = 5
    eps_abs: float = 1e-6
    eps_rel: float = 1e-6
    # polishing is attempted once residuals fall below these
    eps_polish_abs: float = 1e-2
    eps_polish_rel: float = 1e-2
    eps_prim_inf: float = 1e-6
    max_iter: int = 200_000
    # problems still running after this many iterations go to the interior-point
    # fallback (0 disables it)
    fallback_after: int = 5000
    fallback_iter: int = 100
    scaling_iter: int = 10
    polish: bool = True
    polish_refine: int = 3
    polish_delta: float = 1e-9
    # acceptance contract, checked on the original problem
    tol_primal: float = 1e-6
    tol_stationarity: float = 1e-5
    tol_dual_sign: float = 1e-8
    tol_complementarity: float = 1e-6


DEFAULT_SETTINGS = QpSettings()
# zero-objective checks stall near the boundary; an exact LP settles the rest
FEASIBILITY_SETTINGS = QpSettings(max_iter=2000)


def _matrix(value, rows: int | None, cols: int, name: str) -> np.ndarray:
    if value is None:
        return np.zeros((0, cols))
    arr = np.array(value, dtype=float, ndmin=2)
    if arr.size == 0:
        return np.zeros((0, cols))
    if arr.shape[1] != cols or (rows is not None and arr.shape[0] != rows):
        raise ValueError(f"{name} has shape {arr.shape}, expected ({rows if rows is not None else 'm'}, {cols})")
    return arr


@dataclass
class QpProblem:
    """``min 1/2 y'Hy + f'y`` s.t. ``G_eq y = b_eq``, ``G_in y <= b_in``."""

    H: np.ndarray
    f: np.ndarray
    G_eq: np.ndarray = None
    b_eq: np.ndarray = None
    G_in: np.ndarray = None
    b_in: np.ndarray = None

    def __post_init__(self):
        H = np.array(self.H, dtype=float, ndmin=2)
        n = H.shape[0]
        if H.shape != (n, n):
            raise ValueError(f"H must be square, got {H.shape}")
        self.H = 0.5 * (H + H.T)
        self.f = np.array(self.f, dtype=float).reshape(-1)
        if self.f.size != n:
            raise ValueError(f"f has {self.f.size} entries, expected {n}")
        self.G_eq = _matrix(self.G_eq, None, n, "G_eq")
        self.b_eq = np.zeros(0) if self.b_eq is None else np.array(self.b_eq, dtype=float).reshape(-1)
        self.G_in = _matrix(self.G_in, None, n, "G_in")
        self.b_in = np.zeros(0) if self.b_in is None else np.array(self.b_in, dtype=float).reshape(-1)
        if self.b_eq.size != self.G_eq.shape[0]:
            raise ValueError("b_eq length does not match G_eq rows")
        if self.b_in.size != self.G_in.shape[0]:
            raise ValueError("b_in length does not match G_in rows")
        for name in ("H", "f", "G_eq", "b_eq", "G_in", "b_in"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite entries")

    @property
    def n(self) -> int:
        return self.H.shape[0]

    def objective(self, y) -> float:
        y = np.asarray(y, dtype=float)
        return float(0.5 * y @ self.H @ y + self.f @ y)

    def dump(self, path) -> None:
        """Write every block as a plain-text matrix (header ``name rows cols``)."""
        with open(path, "w") as fh:
            for name in ("H", "f", "G_eq", "b_eq", "G_in", "b_in"):
                block = np.atleast_2d(getattr(self, name))
                if getattr(self, name).ndim == 1:
                    block = block.reshape(-1, 1)
                fh.write(f"{name} {block.shape[0]} {block.shape[1]}\n")
                for row in block:
                    fh.write(" ".join(repr(float(v)) for v in row) + "\n")


@dataclass
class QpSolution:
    y_star: np.ndarray
    objective: float
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    lam: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    certificate: np.ndarray | None = None
    polished: bool = False
    warm: "WarmStart | None" = field(default=None, repr=False)

    @property
    def optimal(self) -> bool:
        return self.status == OPTIMAL


@dataclass
class WarmStart:
    """Primal point and inequality multipliers from an earlier solve."""

    y: np.ndarray
    mu: np.ndarray
    rho: np.ndarray | float | None = None


@dataclass
class QpBatchSolution:
    y: np.ndarray          # (B, n)
    lam: np.ndarray        # (B, m_e)
    mu: np.ndarray         # (B, m_i)
    objective: np.ndarray  # (B,)
    status: np.ndarray     # (B,) of str
    primal_residual: np.ndarray
    dual_residual: np.ndarray
    iterations: np.ndarray
    polished: np.ndarray
    rho: np.ndarray
    certificate: np.ndarray  # (B, m_i + m_e), zero unless infeasible

    def __len__(self):
        return self.y.shape[0]

    @property
    def all_optimal(self) -> bool:
        return bool(np.all(self.status == OPTIMAL))

    def warm(self) -> WarmStart:
        return WarmStart(self.y.copy(), self.mu.copy(), self.rho.copy())

    def subset(self, mask) -> "QpBatchSolution":
        """Rows selected by a boolean mask or index array."""
        return QpBatchSolution(*(getattr(self, f.name)[mask] for f in fields(self)))

    def item(self, i: int) -> QpSolution:
        m_i = self.mu.shape[1]
        cert = self.certificate[i] if self.status[i] == PRIMAL_INFEASIBLE else None
        return QpSolution(
            y_star=self.y[i].copy(), objective=float(self.objective[i]), status=str(self.status[i]),
            primal_residual=float(self.primal_residual[i]), dual_residual=float(self.dual_residual[i]),
            iterations=int(self.iterations[i]), lam=self.lam[i].copy(), mu=self.mu[i].copy(),
            certificate=None if cert is None else {"inequality": cert[:m_i].copy(),
                                                   "equality": cert[m_i:].copy()},
            polished=bool(self.polished[i]),
            warm=WarmStart(self.y[i:i + 1].copy(), self.mu[i:i + 1].copy(), self.rho[i:i + 1].copy()),
        )


def _inf_norm(a: np.ndarray) -> np.ndarray:
    """Row-wise infinity norm of a 2-d array (0 for zero columns)."""
    if a.shape[1] == 0:
        return np.zeros(a.shape[0])
    return np.abs(a).max(axis=1)


def _ruiz(P: np.ndarray, A: np.ndarray, iters: int):
    """Diagonal equilibration of the KKT matrix ``[[P, A'], [A, 0]]``."""
    n, m = P.shape[0], A.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    Ps, As = P.copy(), A.copy()
    for _ in range(iters):
        col = np.abs(Ps).max(axis=0)
        if m:
            col = np.maximum(col, np.abs(As).max(axis=0))
        d = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        d[col == 0] = 1.0
        if m:
            row = np.abs(As).max(axis=1)
            e = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
            e[row == 0] = 1.0
        else:
            e = np.ones(0)
        Ps = d[:, None] * Ps * d[None, :]
        As = e[:, None] * As * d[None, :]
        D *= d
        E *= e
    return D, E, Ps, As


class _Reduced:
    """Shared (batch-independent) data of the equality-eliminated problem."""

    def __init__(self, H, G_eq, G_in, settings: QpSettings, f_hint=None):
        n = H.shape[0]
        self.n = n
        self.m_e = G_eq.shape[0]
        self.m_i = G_in.shape[0]
        self.H, self.G_eq, self.G_in = H, G_eq, G_in
        if self.m_e:
            self.Z = _nullspace(G_eq)
            self.eq_pinv = np.linalg.pinv(G_eq, rcond=1e-12)
            self.eqT_pinv = np.linalg.pinv(G_eq.T, rcond=1e-12)
            # columns absent from the equalities have a zero particular part
            self.eq_pinv[~np.any(G_eq != 0, axis=0)] = 0.0
        else:
            self.Z = np.eye(n)
            self.eq_pinv = np.zeros((n, 0))
            self.eqT_pinv = np.zeros((0, n))
        self.nr = self.Z.shape[1]
        # single-variable bound rows on columns kept as unit vectors in Z:
        # (row, reduced index, coefficient), used to land polished points exactly
        unit = {int(np.flatnonzero(self.Z[:, k])[0]): k for k in range(self.nr)
                if np.count_nonzero(self.Z[:, k]) == 1 and self.Z[:, k].max() == 1.0}
        self.bounds = []
        for i in range(self.m_i):
            nz = np.flatnonzero(G_in[i])
            if nz.size == 1 and int(nz[0]) in unit:
                self.bounds.append((i, unit[int(nz[0])], float(G_in[i, nz[0]])))
        self.P = self.Z.T @ H @ self.Z
        self.P = 0.5 * (self.P + self.P.T)
        self.A = G_in @ self.Z
        D, E, _, _ = _ruiz(self.P, self.A, settings.scaling_iter)
        if f_hint is not None and self.nr:
            D, E = _linear_column_scaling(self.P, self.A, self.Z.T @ np.abs(f_hint), D, E)
        self.D, self.E = D, E
        self.Ps = D[:, None] * self.P * D[None, :]
        self.As = E[:, None] * self.A * D[None, :]
        self.Dinv = 1.0 / self.D
        self.Einv = 1.0 / self.E
        self.AtA = self.As.T @ self.As
        # column-norm proxy for the cost scaling
        self.p_scale = float(np.mean(np.abs(self.Ps).max(axis=0))) if self.nr else 0.0


def _nullspace(G_eq) -> np.ndarray:
    """Orthonormal nullspace basis; columns absent from ``G_eq`` stay unit vectors."""
    n = G_eq.shape[1]
    used = np.flatnonzero(np.any(G_eq != 0, axis=0))
    free = np.setdiff1d(np.arange(n), used)
    U, s, Vt = np.linalg.svd(G_eq[:, used])
    tol = max(G_eq.shape) * np.finfo(float).eps * (s[0] if s.size else 0.0)
    rank = int(np.sum(s > tol))
    Z = np.zeros((n, used.size - rank + free.size))
    Z[used, : used.size - rank] = Vt[rank:].T
    Z[free, used.size - rank:] = np.eye(free.size)
    return Z


LINEAR_COST_TARGET = 10.0


def _adapt_now(it: int, s: QpSettings) -> bool:
    """Penalty updates every ``adapt_every`` iterations inside the initial
    window, then only at ``adapt_every * 2**k``; finitely many updates keep
    the iteration convergent."""
    if it % s.adapt_every:
        return False
    if it <= s.adapt_window:
        return True
    k = it // s.adapt_every
    return k & (k - 1) == 0


def _linear_column_scaling(P, A, c_abs, D, E):
    """Rescale variables that enter the cost only linearly so their scaled
    cost is O(1), then re-equilibrate the rows this disturbs.

    Without this a large linear weight (an exact-penalty slack, say) yields
    multipliers many orders above the rest and the splitting iteration crawls.
    """
    linear = np.all(P == 0, axis=0) & (c_abs * D > LINEAR_COST_TARGET)
    if not np.any(linear):
        return D, E
    D = D.copy()
    D[linear] *= LINEAR_COST_TARGET / (c_abs[linear] * D[linear])
    if A.shape[0]:
        row = np.abs(E[:, None] * A * D[None, :]).max(axis=1)
        touched = np.any(A[:, linear] != 0, axis=1) & (row > 0)
        E = E.copy()
        E[touched] /= row[touched]
    return D, E


def _kkt_inverses(red: _Reduced, cost_scale, rho, sigma) -> np.ndarray:
    mats = (cost_scale[:, None, None] * red.Ps[None]
            + sigma * np.eye(red.nr)[None]
            + rho[:, None, None] * red.AtA[None])
    return np.linalg.inv(mats)


def _contract(prob_H, f, G_eq, b_eq, G_in, b_in, eqT_pinv, y, mu, settings: QpSettings):
    """Residuals of the original problem and whether they meet the contract."""
    grad = y @ prob_H + f
    if G_in.shape[0]:
        slack = y @ G_in.T - b_in
        grad_in = grad + mu @ G_in
    else:
        slack = np.zeros((y.shape[0], 0))
        grad_in = grad
    lam = -(grad_in @ eqT_pinv.T) if G_eq.shape[0] else np.zeros((y.shape[0], 0))
    stat = grad_in + (lam @ G_eq if G_eq.shape[0] else 0.0)
    eq_res = _inf_norm(y @ G_eq.T - b_eq) if G_eq.shape[0] else np.zeros(y.shape[0])
    in_res = np.clip(slack, 0.0, None).max(axis=1) if slack.shape[1] else np.zeros(y.shape[0])
    primal = np.maximum(eq_res, in_res)
    dual = _inf_norm(stat)
    if mu.shape[1]:
        sign_ok = mu.min(axis=1) >= -settings.tol_dual_sign
        comp = np.abs(mu * slack).max(axis=1)
    else:
        sign_ok = np.ones(y.shape[0], dtype=bool)
        comp = np.zeros(y.shape[0])
    ok = ((primal <= settings.tol_primal) & (dual <= settings.tol_stationarity)
          & sign_ok & (comp <= settings.tol_complementarity))
    return ok, primal, dual, lam


def solve_qp_batch(H, f, G_eq=None, b_eq=None, G_in=None, b_in=None,
                   settings: QpSettings = DEFAULT_SETTINGS,
                   warm_start: WarmStart | None = None) -> QpBatchSolution:
    """Solve ``B`` QPs sharing ``H``, ``G_eq``, ``G_in``.

    ``f``, ``b_eq`` and ``b_in`` are ``(B, .)`` arrays (1-d inputs are
    broadcast to the batch size implied by the others).
    """
    H = np.array(H, dtype=float, ndmin=2)
    H = 0.5 * (H + H.T)
    n = H.shape[0]
    G_eq = _matrix(G_eq, None, n, "G_eq")
    G_in = _matrix(G_in, None, n, "G_in")
    f = np.atleast_2d(np.asarray(f, dtype=float))
    b_eq = np.zeros((1, 0)) if b_eq is None else np.atleast_2d(np.asarray(b_eq, dtype=float))
    b_in = np.zeros((1, 0)) if b_in is None else np.atleast_2d(np.asarray(b_in, dtype=float))
    B = max(f.shape[0], b_eq.shape[0], b_in.shape[0])
    f = np.broadcast_to(f, (B, n))
    b_eq = np.broadcast_to(b_eq, (B, G_eq.shape[0]))
    b_in = np.broadcast_to(b_in, (B, G_in.shape[0]))
    red = _Reduced(H, G_eq, G_in, settings, f_hint=np.abs(f).max(axis=0))
    return _solve_reduced(red, f, b_eq, b_in, settings, warm_start)


def _solve_reduced(red: _Reduced, f, b_eq, b_in, settings: QpSettings,
                   warm_start: WarmStart | None) -> QpBatchSolution:
    B = f.shape[0]
    n, m_e, m_i, nr = red.n, red.m_e, red.m_i, red.nr
    s = settings

    out_y = np.zeros((B, n))
    out_mu = np.zeros((B, m_i))
    out_status = np.full(B, MAX_ITERATIONS, dtype=object)
    out_iter = np.zeros(B, dtype=int)
    out_polished = np.zeros(B, dtype=bool)
    out_rho = np.full(B, float(s.rho))
    out_cert = np.zeros((B, m_i + m_e))

    # particular solution of the equalities
    y_p = b_eq @ red.eq_pinv.T if m_e else np.zeros((B, n))
    eq_gap = _inf_norm(y_p @ red.G_eq.T - b_eq) if m_e else np.zeros(B)
    eq_scale = 1.0 + (_inf_norm(b_eq) if m_e else np.zeros(B))
    eq_bad = eq_gap > 1e-9 * eq_scale
    if np.any(eq_bad):
        out_status[eq_bad] = PRIMAL_INFEASIBLE
        out_cert[eq_bad, m_i:] = (y_p @ red.G_eq.T - b_eq)[eq_bad]

    c_red = (y_p @ red.H + f) @ red.Z          # (B, nr)
    b_red = b_in - y_p @ red.G_in.T            # (B, m_i)

    live = np.flatnonzero(~eq_bad)
    if nr == 0 and live.size:
        # equalities pin y completely
        slack = -b_red[live]
        feas = slack.max(axis=1, initial=-np.inf) <= s.tol_primal
        done = live[feas]
        out_status[done] = OPTIMAL
        bad = live[~feas]
        out_status[bad] = PRIMAL_INFEASIBLE
        if bad.size:
            worst = np.argmax(slack[~feas], axis=1)
            out_cert[bad, worst] = 1.0
        live = live[:0]

    # scaled data
    cs_all = np.ones(B)
    if live.size:
        c_s_all = c_red * red.D
        denom = np.maximum(red.p_scale, _inf_norm(c_s_all))
        with np.errstate(divide="ignore"):
            cs_all = np.where(denom > 0, 1.0 / denom, 1.0)
        cs_all = np.clip(cs_all, 1e-6, 1e6)
    bs_all = b_red * red.E

    # warm start (mapped into scaled reduced coordinates)
    x = np.zeros((B, nr))
    z = np.zeros((B, m_i))
    yd = np.zeros((B, m_i))
    rho = np.full(B, float(s.rho))
    if warm_start is not None:
        wy = np.broadcast_to(np.atleast_2d(warm_start.y), (B, n))
        wmu = np.broadcast_to(np.atleast_2d(warm_start.mu), (B, m_i))
        x = ((wy - y_p) @ red.Z) * red.Dinv
        z = np.minimum(x @ red.As.T, bs_all)
        yd = np.clip(wmu * red.Einv * cs_all[:, None], 0.0, None)
        if warm_start.rho is not None:
            rho = np.broadcast_to(np.asarray(warm_start.rho, dtype=float).reshape(-1), (B,)).copy()

    x, z, yd, rho = x[live], z[live], yd[live], rho[live]
    cs = cs_all[live]
    c_s = (c_red[live] * red.D) * cs[:, None]
    b_s = bs_all[live]
    Ps, As = red.Ps, red.As
    kinv = _kkt_inverses(red, cs, rho, s.sigma) if live.size else np.zeros((0, nr, nr))
    y_prev = yd.copy()
    tried = np.zeros((live.size, (m_i + 7) // 8), dtype=np.uint8)
    untried = np.ones(live.size, dtype=bool)
    it = 0
    debug = log.isEnabledFor(logging.DEBUG)

    def finish(local_idx, status, t_unscaled=None, mu_unscaled=None, polished=None):
        glob = live[local_idx]
        out_status[glob] = status
        out_iter[glob] = it
        out_rho[glob] = rho[local_idx]
        if t_unscaled is not None:
            out_y[glob] = y_p[glob] + t_unscaled @ red.Z.T
            out_mu[glob] = mu_unscaled
        if polished is not None:
            out_polished[glob] = polished

    while live.size and it < s.max_iter:
        it += 1
        rhs = s.sigma * x - c_s + (rho[:, None] * z - yd) @ As
        xt = np.matmul(kinv, rhs[:, :, None])[:, :, 0]
        zt = xt @ As.T
        x = s.alpha * xt + (1.0 - s.alpha) * x
        zh = s.alpha * zt + (1.0 - s.alpha) * z
        z_new = np.minimum(zh + yd / rho[:, None], b_s)
        yd = yd + rho[:, None] * (zh - z_new)
        z = z_new

        if it % s.check_every and it < s.max_iter:
            continue

        # residuals in the unscaled reduced space
        Ax = x @ As.T
        Px = (x @ Ps) * cs[:, None]
        Aty = yd @ As
        r_p = _inf_norm((Ax - z) * red.Einv)
        r_d = _inf_norm((Px + c_s + Aty) * red.Dinv) / cs
        n_p = np.maximum(_inf_norm(Ax * red.Einv), _inf_norm(z * red.Einv))
        n_d = np.maximum.reduce([_inf_norm(Px * red.Dinv), _inf_norm(Aty * red.Dinv),
                                 _inf_norm(c_s * red.Dinv)]) / cs
        if debug:
            log.debug("it=%d live=%d rho=%s r_p=%s r_d=%s n_d=%s", it, live.size, rho[:3], r_p[:3],
                      r_d[:3], n_d[:3])
        loose = (r_p <= s.eps_abs + s.eps_rel * n_p) & (r_d <= s.eps_abs + s.eps_rel * n_d)
        near = (r_p <= s.eps_polish_abs + s.eps_polish_rel * n_p) & (
            r_d <= s.eps_polish_abs + s.eps_polish_rel * n_d)

        accept = np.zeros(live.size, dtype=bool)
        t_fin = x * red.D
        mu_fin = yd * red.E / cs[:, None]
        pol_flag = np.zeros(live.size, dtype=bool)
        if s.polish:
            # retry polishing only when the detected active set has changed
            packed = _pack_active(b_s, z, yd)
            fresh = untried | np.any(packed != tried, axis=1)
            cand = np.flatnonzero(near & fresh)
            tried[cand] = packed[cand]
            untried[cand] = False
            if cand.size:
                g = live[cand]
                pt, pmu, pok = _polish(red, c_red[g], b_red[g], f[g], b_eq[g], b_in[g], y_p[g],
                                       z[cand], yd[cand], s)
                t_fin[cand[pok]] = pt[pok]
                mu_fin[cand[pok]] = pmu[pok]
                pol_flag[cand[pok]] = True
                accept[cand[pok]] = True
        cand = np.flatnonzero(loose & ~accept)
        if cand.size:
            g = live[cand]
            y_c = y_p[g] + t_fin[cand] @ red.Z.T
            ok, _, _, _ = _contract(red.H, f[g], red.G_eq, b_eq[g], red.G_in, b_in[g],
                                    red.eqT_pinv, y_c, mu_fin[cand], s)
            accept[cand[ok]] = True

        # primal infeasibility certificate
        dy = yd - y_prev
        y_prev = yd.copy()
        dy_u = np.clip(dy, 0.0, None) * red.E / cs[:, None]
        dy_norm = _inf_norm(dy_u)
        with np.errstate(invalid="ignore", divide="ignore"):
            At_dy = _inf_norm((np.clip(dy, 0.0, None) @ As) * red.Dinv / cs[:, None])
            b_dy = np.einsum("ij,ij->i", b_red[live], dy_u)
        infeas = ((dy_norm > 1e-12) & (At_dy <= s.eps_prim_inf * dy_norm)
                  & (b_dy < -s.eps_prim_inf * dy_norm) & ~accept)

        if m_i and s.fallback_after and it == s.fallback_after:
            cand = np.flatnonzero(~(accept | infeas))
            if cand.size:
                g = live[cand]
                pt, pmu, pok = _interior_point(red, c_red[g], b_red[g], f[g], b_eq[g], b_in[g],
                                               y_p[g], s)
                t_fin[cand[pok]] = pt[pok]
                mu_fin[cand[pok]] = pmu[pok]
                pol_flag[cand[pok]] = True
                accept[cand[pok]] = True
                if debug:
                    log.debug("interior-point fallback settled %d of %d", int(pok.sum()), cand.size)

        if np.any(accept):
            idx = np.flatnonzero(accept)
            finish(idx, OPTIMAL, t_fin[idx], mu_fin[idx], pol_flag[idx])
        if np.any(infeas):
            idx = np.flatnonzero(infeas)
            finish(idx, PRIMAL_INFEASIBLE, x[idx] * red.D, mu_fin[idx])
            cert = dy_u[idx] / dy_norm[idx, None]
            glob = live[idx]
            out_cert[glob, :m_i] = cert
            if m_e:
                out_cert[glob, m_i:] = -(cert @ red.G_in) @ red.eqT_pinv.T
        if it >= s.max_iter:
            idx = np.flatnonzero(~(accept | infeas))
            finish(idx, MAX_ITERATIONS, x[idx] * red.D, mu_fin[idx])
        keep = ~(accept | infeas)
        if not np.all(keep):
            live, x, z, yd, y_prev = live[keep], x[keep], z[keep], yd[keep], y_prev[keep]
            tried, untried = tried[keep], untried[keep]
            rho, cs, c_s, b_s, kinv = rho[keep], cs[keep], c_s[keep], b_s[keep], kinv[keep]
        if not live.size:
            break

        if m_i and _adapt_now(it, s):
            # balance residuals of the scaled iteration; unscaled norms can be
            # dominated by a single large cost entry
            Ax = x @ As.T
            Px = (x @ Ps) * cs[:, None]
            Aty = yd @ As
            sp = _inf_norm(Ax - z) / np.maximum(np.maximum(_inf_norm(Ax), _inf_norm(z)), 1e-30)
            sd = _inf_norm(Px + c_s + Aty) / np.maximum(
                np.maximum.reduce([_inf_norm(Px), _inf_norm(Aty), _inf_norm(c_s)]), 1e-30)
            with np.errstate(divide="ignore", invalid="ignore"):
                ratio = np.sqrt(sp / np.maximum(sd, 1e-30))
            ratio = np.where(np.isfinite(ratio) & (ratio > 0), ratio, 1.0)
            new_rho = np.clip(rho * ratio, 1e-6, 1e6)
            change = (new_rho > s.adapt_tolerance * rho) | (new_rho < rho / s.adapt_tolerance)
            if np.any(change):
                idx = np.flatnonzero(change)
                rho[idx] = new_rho[idx]
                kinv[idx] = _kkt_inverses(red, cs[idx], rho[idx], s.sigma)

    if live.size:
        # loop ended by the iteration cap between checks
        idx = np.arange(live.size)
        finish(idx, MAX_ITERATIONS, x * red.D, yd * red.E / cs[:, None])

    ok, primal, dual, lam = _contract(red.H, f, red.G_eq, b_eq, red.G_in, b_in, red.eqT_pinv,
                                      out_y, out_mu, s)
    objective = 0.5 * np.einsum("ij,jk,ik->i", out_y, red.H, out_y) + np.einsum("ij,ij->i", f, out_y)
    degraded = (out_status == OPTIMAL) & ~ok
    if np.any(degraded):
        # cannot happen unless the contract check and the final map disagree numerically
        log.warning("%d solutions lost the optimality contract on unscaling", int(degraded.sum()))
        out_status[degraded] = MAX_ITERATIONS
    return QpBatchSolution(y=out_y, lam=lam, mu=out_mu, objective=objective, status=out_status,
                           primal_residual=primal, dual_residual=dual, iterations=out_iter,
                           polished=out_polished, rho=out_rho, certificate=out_cert)


def _pack_active(b_s, z, yd) -> np.ndarray:
    return np.packbits((b_s - z) < yd, axis=1)


def _step_length(v, dv):
    """Largest step in [0, 1] keeping ``v + a dv`` nonnegative, per row."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(dv < 0, -v / dv, np.inf)
    return np.minimum(1.0, ratio.min(axis=1, initial=np.inf))


def _interior_point(red: _Reduced, c_red, b_red, f, b_eq, b_in, y_p, s: QpSettings):
    """Mehrotra predictor-corrector on the reduced inequality problem.

    Fallback for problems the splitting iteration cannot settle, typically
    exact-penalty costs many orders above the curvature. The result goes
    through the active-set polish, so acceptance uses the same contract.
    """
    B = c_red.shape[0]
    nr = red.nr
    P, A = red.P, red.A
    reg = 1e-12 * max(1.0, float(np.abs(P).max(initial=0.0)))
    eye = np.eye(nr)
    # least-squares start: min 1/2 t'Pt + c't + 1/2 |b - At|^2, then shift the
    # slacks and multipliers into the positive orthant
    t = np.linalg.solve(P + A.T @ A + reg * eye, (b_red @ A - c_red).T).T
    sl = b_red - t @ A.T
    mu = -sl
    sl = sl + np.maximum(0.0, -sl.min(axis=1, keepdims=True)) + 1.0
    mu = mu + np.maximum(0.0, -mu.min(axis=1, keepdims=True)) + 1.0
    scale_c = 1.0 + _inf_norm(c_red)
    scale_b = 1.0 + _inf_norm(b_red)
    active = np.ones(B, dtype=bool)
    for _ in range(s.fallback_iter):
        rd = t @ P + c_red + mu @ A
        rp = t @ A.T + sl - b_red
        nu = (sl * mu).mean(axis=1)
        obj = np.abs(0.5 * np.einsum("ij,jk,ik->i", t, P, t) + np.einsum("ij,ij->i", c_red, t))
        active &= ~((_inf_norm(rd) <= 1e-11 * scale_c) & (_inf_norm(rp) <= 1e-11 * scale_b)
                    & (nu <= 1e-13 * (1.0 + obj)))
        if not np.any(active) or not np.all(np.isfinite(t)):
            break
        W = mu / sl
        M = P[None] + np.einsum("ki,bk,kj->bij", A, W, A) + reg * eye[None]
        try:
            L = np.linalg.cholesky(M)
        except np.linalg.LinAlgError:
            break

        def direction(rc):
            rhs = -rd - (W * rp - rc / sl) @ A
            y = np.linalg.solve(L, rhs[:, :, None])
            dt = np.linalg.solve(np.swapaxes(L, 1, 2), y)[:, :, 0]
            dmu = W * (dt @ A.T + rp) - rc / sl
            ds = (-rc - sl * dmu) / mu
            return dt, ds, dmu

        dt, ds, dmu = direction(sl * mu)
        a_aff = np.minimum(_step_length(sl, ds), _step_length(mu, dmu))
        nu_aff = ((sl + a_aff[:, None] * ds) * (mu + a_aff[:, None] * dmu)).mean(axis=1)
        sigma = (nu_aff / np.maximum(nu, 1e-300)) ** 3
        dt, ds, dmu = direction(sl * mu + ds * dmu - (sigma * nu)[:, None])
        a = 0.99 * np.minimum(_step_length(sl, ds), _step_length(mu, dmu))
        a = np.where(active, np.minimum(a, 1.0), 0.0)[:, None]
        t = t + a * dt
        sl = np.maximum(sl + a * ds, 1e-300)
        mu = np.maximum(mu + a * dmu, 1e-300)
    if not np.all(np.isfinite(t)):
        return t, mu, np.zeros(B, dtype=bool)
    # polish reads the active set from (b - z) < yd, i.e. slack below multiplier
    pt, pmu, pok = _polish(red, c_red, b_red, f, b_eq, b_in, y_p, b_red * red.E - sl, mu, s)
    mu_raw = np.where(sl < mu, mu, 0.0)
    y_raw = y_p + t @ red.Z.T
    rok, _, _, _ = _contract(red.H, f, red.G_eq, b_eq, red.G_in, b_in, red.eqT_pinv, y_raw,
                             mu_raw, s)
    use_raw = ~pok & rok
    pt[use_raw] = t[use_raw]
    pmu[use_raw] = mu_raw[use_raw]
    return pt, pmu, pok | rok


def _polish(red: _Reduced, c_red, b_red, f, b_eq, b_in, y_p, z, yd, s: QpSettings):
    """Active-set refinement; returns reduced ``t``, multipliers and success mask."""
    B = c_red.shape[0]
    nr, m_i = red.nr, red.m_i
    t_out = np.zeros((B, nr))
    mu_out = np.zeros((B, m_i))
    bs = b_red * red.E
    active = (bs - z) < yd
    if m_i:
        packed = np.packbits(active, axis=1)
        keys = np.ascontiguousarray(packed).view(np.dtype((np.void, packed.shape[1]))).reshape(-1)
        _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        patterns = active[first]
        inverse = np.asarray(inverse).reshape(-1)
    else:
        patterns, inverse = active[:1], np.zeros(B, dtype=int)
    P, A = red.P, red.A
    for k, pattern in enumerate(patterns):
        members = np.flatnonzero(inverse == k)
        act = np.flatnonzero(pattern)
        A_act = A[act]
        na = act.size
        K = np.zeros((nr + na, nr + na))
        K[:nr, :nr] = P
        K[:nr, nr:] = A_act.T
        K[nr:, :nr] = A_act
        K_reg = K.copy()
        K_reg[:nr, :nr] += s.polish_delta * np.eye(nr)
        K_reg[nr:, nr:] -= s.polish_delta * np.eye(na)
        try:
            lu = sla.lu_factor(K_reg, check_finite=False)
        except (ValueError, np.linalg.LinAlgError):
            continue
        rhs = np.hstack([-c_red[members], b_red[members][:, act]]).T
        sol = sla.lu_solve(lu, rhs, check_finite=False)
        for _ in range(s.polish_refine):
            sol = sol + sla.lu_solve(lu, rhs - K @ sol, check_finite=False)
        if not np.all(np.isfinite(sol)):
            continue
        t_mem = sol[:nr].T
        mu_act = sol[nr:].T
        # dependent active rows admit multiplier splits with mixed signs;
        # re-fit those as the nonnegative least-squares solution
        for j in np.flatnonzero(mu_act.min(axis=1, initial=0.0) < -s.tol_dual_sign):
            grad = P @ t_mem[j] + c_red[members[j]]
            mu_act[j] = nnls(A_act.T, -grad)[0]
        for row, k_t, coef in red.bounds:
            if pattern[row]:
                t_mem[:, k_t] = b_red[members, row] / coef
        t_out[members] = t_mem
        mu_full = np.zeros((members.size, m_i))
        mu_full[:, act] = mu_act
        mu_out[members] = mu_full
    y = y_p + t_out @ red.Z.T
    mu_out = np.where(mu_out < 0, np.where(mu_out > -s.tol_dual_sign, 0.0, mu_out), mu_out)
    ok, _, _, _ = _contract(red.H, f, red.G_eq, b_eq, red.G_in, b_in, red.eqT_pinv, y, mu_out, s)
    return t_out, mu_out, ok


def solve_qp(p: QpProblem, settings: QpSettings = DEFAULT_SETTINGS,
             warm_start: WarmStart | QpSolution | None = None) -> QpSolution:
    """Solve a single QP. Never raises on numerical trouble; see ``status``."""
    if isinstance(warm_start, QpSolution):
        warm_start = warm_start.warm or WarmStart(warm_start.y_star, warm_start.mu)
    batch = solve_qp_batch(p.H, p.f, p.G_eq, p.b_eq, p.G_in, p.b_in, settings, warm_start)
    return batch.item(0)


def _lp_feasible(G_eq, b_eq, G_in, b_in) -> bool:
    """Exact feasibility of one polyhedron by a zero-objective LP (HiGHS)."""
    n = G_in.shape[1] if G_in.shape[0] else G_eq.shape[1]
    res = linprog(np.zeros(n), A_ub=G_in if G_in.shape[0] else None,
                  b_ub=b_in if G_in.shape[0] else None,
                  A_eq=G_eq if G_eq.shape[0] else None, b_eq=b_eq if G_eq.shape[0] else None,
                  bounds=[(None, None)] * n, method="highs")
    if res.status == 0:
        return True
    if res.status == 2:
        return False
    log.warning("LP feasibility fallback undecided (%s); reporting infeasible", res.message)
    return False


def check_feasibility(p: QpProblem, settings: QpSettings = FEASIBILITY_SETTINGS):
    """``("feasible" | "infeasible", warning)`` from a zero-objective solve.

    When the splitting iteration hits its cap the question is settled by an
    exact LP instead; ``warning`` records that the fallback was used.
    """
    zero = QpProblem(np.zeros_like(p.H), np.zeros(p.n), p.G_eq, p.b_eq, p.G_in, p.b_in)
    sol = solve_qp(zero, settings)
    if sol.status == OPTIMAL:
        return "feasible", False
    if sol.status == MAX_ITERATIONS:
        log.info("feasibility check hit the iteration cap; resolving with an LP")
        ok = _lp_feasible(p.G_eq, p.b_eq, p.G_in, p.b_in)
        return ("feasible" if ok else "infeasible"), True
    return "infeasible", False


class BatchSolver:
    """Reusable solver for a family of QPs with fixed matrices.

    Factorizations, scaling and the nullspace basis are computed once; each
    :meth:`solve` call supplies per-problem vectors.
    """

    def __init__(self, H, G_eq, G_in, settings: QpSettings = DEFAULT_SETTINGS, f_hint=None):
        H = np.array(H, dtype=float, ndmin=2)
        self.H = 0.5 * (H + H.T)
        n = self.H.shape[0]
        self.G_eq = _matrix(G_eq, None, n, "G_eq")
        self.G_in = _matrix(G_in, None, n, "G_in")
        self.settings = settings
        # typical linear cost; sets the scale of purely linear variables
        self.f_hint = None if f_hint is None else np.abs(np.asarray(f_hint, dtype=float)).reshape(-1)
        self._red = _Reduced(self.H, self.G_eq, self.G_in, settings, self.f_hint)

    def solve(self, f, b_eq, b_in, warm_start: WarmStart | None = None) -> QpBatchSolution:
        n = self.H.shape[0]
        f = np.atleast_2d(np.asarray(f, dtype=float))
        b_eq = np.atleast_2d(np.asarray(b_eq, dtype=float)) if self.G_eq.shape[0] else np.zeros((1, 0))
        b_in = np.atleast_2d(np.asarray(b_in, dtype=float)) if self.G_in.shape[0] else np.zeros((1, 0))
        B = max(f.shape[0], b_eq.shape[0], b_in.shape[0])
        f = np.broadcast_to(f, (B, n))
        b_eq = np.broadcast_to(b_eq, (B, self.G_eq.shape[0]))
        b_in = np.broadcast_to(b_in, (B, self.G_in.shape[0]))
        return _solve_reduced(self._red, f, b_eq, b_in, self.settings, warm_start)

    def feasible(self, b_eq, b_in, settings: QpSettings = None):
        """Feasibility mask for a batch plus a mask of cases settled by the LP fallback."""
        if getattr(self, "_zero", None) is None:
            self._zero = BatchSolver(np.zeros_like(self.H), self.G_eq, self.G_in,
                                     settings or FEASIBILITY_SETTINGS)
        sol = self._zero.solve(np.zeros(self.H.shape[0]), b_eq, b_in)
        ok = sol.status == OPTIMAL
        cap = sol.status == MAX_ITERATIONS
        if cap.any():
            b_eq = np.broadcast_to(np.atleast_2d(b_eq), (len(ok), self.G_eq.shape[0]))
            b_in = np.broadcast_to(np.atleast_2d(b_in), (len(ok), self.G_in.shape[0]))
            for i in np.flatnonzero(cap):
                ok[i] = _lp_feasible(self.G_eq, b_eq[i], self.G_in, b_in[i])
        return ok, cap
