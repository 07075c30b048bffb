"""Disturbance models, seeded scenario generation and error propagation.

Every random stream is derived from ``numpy.random.SeedSequence(seed,
spawn_key=(stream, index))`` so a scenario depends only on its seed and
index, never on how many other scenarios were drawn or in which order.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

KINDS = ("truncated-gaussian", "uniform-ball", "user-table")
MAX_ATTEMPTS = 1_000_000

# spawn-key prefixes, one per independent purpose
STREAM_DISTURBANCE = 0
STREAM_INITIAL_STATE = 1


class SamplingError(RuntimeError):
    """A rejection sampler could not produce an accepted draw."""


def stream(seed: int, *key: int) -> np.random.Generator:
    """Counter-mode generator for ``(seed, key...)``."""
    return np.random.Generator(np.random.PCG64(
        np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))))


def _psd_sqrt(cov: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (cov + cov.T))
    if w.min() < -1e-12 * max(1.0, abs(w).max()):
        raise ValueError("covariance must be positive semidefinite")
    return V * np.sqrt(np.clip(w, 0.0, None))


@dataclass(frozen=True)
class DisturbanceModel:
    """Marginal law of one disturbance vector; steps are drawn i.i.d.

    ``truncated-gaussian``: zero-mean Gaussian with ``covariance`` conditioned
    on ``|w|^2 <= truncation_radius_sq`` (``inf`` disables truncation).
    ``uniform-ball``: uniform on the ball ``|w|^2 <= truncation_radius_sq``.
    ``user-table``: rows of ``table`` resampled uniformly with replacement.
    """

    kind: str
    n_x: int
    covariance: np.ndarray | None = None
    truncation_radius_sq: float = float("inf")
    seed: int = 0
    table: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown disturbance kind {self.kind!r}; expected one of {KINDS}")
        if self.truncation_radius_sq < 0:
            raise ValueError("truncation_radius_sq must be non-negative")
        if self.kind == "truncated-gaussian":
            if self.covariance is None:
                raise ValueError("truncated-gaussian needs a covariance")
            cov = np.array(self.covariance, dtype=float, ndmin=2)
            if cov.shape != (self.n_x, self.n_x):
                raise ValueError(f"covariance must be {self.n_x}x{self.n_x}, got {cov.shape}")
            object.__setattr__(self, "covariance", cov)
        elif self.kind == "uniform-ball":
            if not np.isfinite(self.truncation_radius_sq):
                raise ValueError("uniform-ball needs a finite truncation_radius_sq")
        else:
            if self.table is None:
                raise ValueError("user-table needs a table of disturbance rows")
            table = np.array(self.table, dtype=float, ndmin=2)
            if table.shape[1] != self.n_x or table.shape[0] == 0:
                raise ValueError(f"user table must have n_x={self.n_x} columns and >= 1 row")
            object.__setattr__(self, "table", table)

    @classmethod
    def from_csv(cls, path, n_x: int, seed: int = 0) -> "DisturbanceModel":
        """Load a user table: one pre-drawn disturbance vector per row."""
        rows = []
        with open(path, newline="") as fh:
            for rec in csv.reader(fh):
                if not rec or rec[0].lstrip().startswith("#"):
                    continue
                try:
                    rows.append([float(v) for v in rec])
                except ValueError:
                    if rows:
                        raise
                    # header line
        return cls(kind="user-table", n_x=n_x, seed=seed, table=np.array(rows))

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed,
               "truncation_radius_sq": self.truncation_radius_sq}
        if self.covariance is not None:
            out["covariance"] = self.covariance.tolist()
        if self.table is not None:
            out["table_rows"] = int(self.table.shape[0])
        return out

    def draw(self, rng: np.random.Generator, count: int) -> np.ndarray:
        """``count`` i.i.d. vectors, shape ``(count, n_x)``."""
        if self.kind == "user-table":
            return self.table[rng.integers(0, self.table.shape[0], size=count)]
        if self.kind == "uniform-ball":
            radius = np.sqrt(self.truncation_radius_sq)
            direction = rng.standard_normal((count, self.n_x))
            norms = np.linalg.norm(direction, axis=1, keepdims=True)
            norms[norms == 0.0] = 1.0
            scale = radius * rng.random((count, 1)) ** (1.0 / self.n_x)
            return direction / norms * scale
        root = _psd_sqrt(self.covariance)
        out = rng.standard_normal((count, self.n_x)) @ root.T
        if not np.isfinite(self.truncation_radius_sq):
            return out
        pending = np.flatnonzero(np.einsum("ij,ij->i", out, out) > self.truncation_radius_sq)
        attempts = 1
        while pending.size:
            if attempts >= MAX_ATTEMPTS:
                raise SamplingError(
                    f"truncated Gaussian rejected {MAX_ATTEMPTS} times in a row; "
                    "the truncation region has (near) zero probability")
            redraw = rng.standard_normal((pending.size, self.n_x)) @ root.T
            out[pending] = redraw
            keep = np.einsum("ij,ij->i", redraw, redraw) > self.truncation_radius_sq
            pending = pending[keep]
            attempts += 1
        return out


def draw_disturbance_sequence(model: DisturbanceModel, length: int, scenario_index: int,
                              seed: int | None = None) -> np.ndarray:
    """Disturbance sequence ``w_0 .. w_{L-1}`` (shape ``(L, n_x)``) for one scenario."""
    if length < 1:
        raise ValueError("sequence length must be at least 1")
    rng = stream(model.seed if seed is None else seed, STREAM_DISTURBANCE, scenario_index)
    return model.draw(rng, length)


def draw_disturbance_batch(model: DisturbanceModel, length: int, count: int,
                           seed: int | None = None, first_index: int = 0) -> np.ndarray:
    """Stack of sequences for scenarios ``first_index .. first_index+count-1``.

    Shape ``(count, length, n_x)``; row ``i`` equals
    ``draw_disturbance_sequence(model, length, first_index + i)``.
    """
    out = np.empty((count, length, model.n_x))
    for i in range(count):
        out[i] = draw_disturbance_sequence(model, length, first_index + i, seed)
    return out


def propagate_error(A_K, d) -> np.ndarray:
    """Error recursion ``e_0 = 0``, ``e_{l+1} = A_K e_l + d_l``.

    ``d`` has shape ``(L, n_x)`` or ``(S, L, n_x)``; the result has one more
    step along the time axis (``L + 1`` entries).
    """
    A_K = np.asarray(A_K, dtype=float)
    d = np.asarray(d, dtype=float)
    single = d.ndim == 2
    if single:
        d = d[None]
    if d.shape[-1] != A_K.shape[0]:
        raise ValueError(f"disturbance dimension {d.shape[-1]} does not match A_K {A_K.shape}")
    S, L, n_x = d.shape
    e = np.zeros((S, L + 1, n_x))
    for step in range(L):
        e[:, step + 1] = e[:, step] @ A_K.T + d[:, step]
    return e[0] if single else e


@dataclass
class ScenarioBatch:
    """Initial states ``x0`` (``(S, n_x)``) and disturbances (``(S, M, n_x)``)."""

    x0: np.ndarray
    disturbances: np.ndarray
    batch_seed: int
    candidates_drawn: int = 0

    def __len__(self):
        return self.x0.shape[0]

    @property
    def horizon(self) -> int:
        return self.disturbances.shape[1]

    def digest(self) -> str:
        import hashlib
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x0).tobytes())
        h.update(np.ascontiguousarray(self.disturbances).tobytes())
        return h.hexdigest()


def sample_feasible_initial_states(count: int, is_feasible, box, seed: int,
                                   block: int = 512, max_draws: int = 1_000_000,
                                   min_rate: float = 1e-4) -> tuple[np.ndarray, int]:
    """Uniform draws from ``box`` kept iff ``is_feasible`` accepts them.

    ``is_feasible`` maps an ``(n, n_x)`` array to a boolean mask. Candidate
    ``c`` comes from its own stream, so the accepted set does not depend on
    ``block``. Returns the states and the number of candidates examined.
    """
    box = np.asarray(box, dtype=float).reshape(-1)
    accepted = []
    n_acc = 0
    drawn = 0
    while n_acc < count:
        if drawn >= max_draws:
            break
        idx = range(drawn, min(drawn + block, max_draws))
        cand = np.array([stream(seed, STREAM_INITIAL_STATE, c).uniform(-box, box) for c in idx])
        mask = np.asarray(is_feasible(cand), dtype=bool)
        keep = cand[mask][: count - n_acc]
        accepted.append(keep)
        n_acc += keep.shape[0]
        drawn += len(idx)
        if drawn >= 10_000 and n_acc / drawn < min_rate:
            break
    if n_acc < count:
        rate = n_acc / max(drawn, 1)
        raise SamplingError(
            f"only {n_acc} of {count} feasible initial states after {drawn} draws "
            f"(acceptance rate {rate:.2e})")
    return np.vstack(accepted), drawn


def sample_feasible_initial_state(is_feasible, box, seed: int, block: int = 64) -> np.ndarray:
    """Single draw of :func:`sample_feasible_initial_states`."""
    x0, _ = sample_feasible_initial_states(1, is_feasible, box, seed, block=block)
    return x0[0]
