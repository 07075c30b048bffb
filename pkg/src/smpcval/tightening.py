"""Sample-based constraint tightening.

For each prediction step ``l`` and constraint row ``j`` the tightening
``q[l, j]`` is the ``r``-th largest of ``C_K[j] @ e_l`` over ``S_q``
sampled disturbance sequences, where ``e`` follows the error recursion
driven by the ancillary gain. Splitting ``delta`` over all ``N * n_h``
(step, row) pairs makes the bound hold jointly.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .probval import ProbabilisticLevels, generalized_max_columns, sample_complexity
from .sysmodel import ControllerDesign, LtiSystem, closed_loop_matrix
from .uncertainty import DisturbanceModel, draw_disturbance_batch, propagate_error


class TighteningError(ValueError):
    """The tightened constraint set lost its interior."""


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class TighteningProfile:
    q: np.ndarray               # (N, n_h)
    levels: ProbabilisticLevels
    S_q: int
    seed: int

    @property
    def N(self) -> int:
        return self.q.shape[0]

    @property
    def n_h(self) -> int:
        return self.q.shape[1]

    def column_max(self) -> np.ndarray:
        """Largest tightening per constraint row over the horizon."""
        return self.q.max(axis=0)

    def content(self) -> dict:
        return {"q": self.q.tolist(), "levels": self.levels.to_dict(),
                "S_q": int(self.S_q), "seed": int(self.seed)}

    def digest(self) -> str:
        return hashlib.sha256(_canonical(self.content()).encode()).hexdigest()

    def to_json(self, extra: dict | None = None) -> str:
        doc = dict(extra or {})
        doc.update(self.content())
        doc["column_max"] = self.column_max().tolist()
        doc["content_hash"] = self.digest()
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "TighteningProfile":
        doc = json.loads(text)
        prof = cls(q=np.array(doc["q"], dtype=float), levels=ProbabilisticLevels(**doc["levels"]),
                   S_q=int(doc["S_q"]), seed=int(doc["seed"]))
        if "content_hash" in doc and doc["content_hash"] != prof.digest():
            raise ValueError("tightening profile content hash does not match its data")
        return prof


def tightening_from_samples(A_K, C_K, disturbances, r: int, N: int) -> np.ndarray:
    """``q[l, j] = r``-th largest of ``C_K[j] e_l`` over the samples, ``l < N``.

    ``disturbances`` has shape ``(S, L, n_x)`` with ``L >= N - 1``.
    """
    C_K = np.atleast_2d(np.asarray(C_K, dtype=float))
    d = np.asarray(disturbances, dtype=float)
    if d.shape[1] < N - 1:
        raise ValueError(f"need sequences of length >= {N - 1}, got {d.shape[1]}")
    e = propagate_error(A_K, d[:, : max(N - 1, 1)])[:, :N]   # (S, N, n_x)
    scores = e @ C_K.T                                        # (S, N, n_h)
    q = generalized_max_columns(scores.reshape(d.shape[0], -1), r).reshape(N, C_K.shape[0])
    return q + 0.0  # normalises -0.0


def compute_tightening(sys: LtiSystem, design: ControllerDesign, model: DisturbanceModel,
                       levels: ProbabilisticLevels, S_q: int | None = None,
                       seed: int | None = None) -> TighteningProfile:
    """Draw the sample set, propagate errors and return the tightening profile.

    ``levels.multiplicity`` is forced to ``n_h * N``. ``S_q`` defaults to the
    closed-form sample complexity; a larger value may be passed, a smaller
    one is rejected.
    """
    N = design.N
    levels = dataclasses.replace(levels, multiplicity=sys.n_h * N)
    required = sample_complexity(levels)
    if S_q is None:
        S_q = required
    elif S_q < required:
        raise ValueError(f"S_q={S_q} is below the required sample complexity {required}")
    seed = model.seed if seed is None else int(seed)
    d = draw_disturbance_batch(model, N, S_q, seed=seed)
    A_K = closed_loop_matrix(sys, design.K)
    q = tightening_from_samples(A_K, design.C_K, d, levels.r, N)
    margin = sys.h[None, :] - q
    if np.any(margin <= 0):
        l, j = np.argwhere(margin <= 0)[0]
        raise TighteningError(
            f"tightened bound h - q is not positive at step {l}, row {j} "
            f"(h={sys.h[j]:.4g}, q={q[l, j]:.4g}); increase epsilon_q or choose another K")
    q.setflags(write=False)
    return TighteningProfile(q=q, levels=levels, S_q=int(S_q), seed=seed)


@dataclass
class ValidationReport:
    frequency: np.ndarray        # (N, n_h) empirical violation frequency
    threshold: float
    S_val: int
    seed: int

    @property
    def flagged(self) -> list[tuple[int, int]]:
        return [tuple(int(i) for i in ij) for ij in np.argwhere(self.frequency > self.threshold)]

    @property
    def ok(self) -> bool:
        return not self.flagged


def validate_tightening(profile: TighteningProfile, sys: LtiSystem, design: ControllerDesign,
                        model: DisturbanceModel, S_val: int, fresh_seed: int,
                        chunk: int = 20_000) -> ValidationReport:
    """Held-out check of ``P{C_K[j] e_l > q[l, j]}`` on ``S_val`` fresh sequences.

    Cells above ``eps + 3 sqrt(eps (1 - eps) / S_val)`` are flagged.
    """
    if int(fresh_seed) == int(profile.seed):
        raise ValueError("validation seed must differ from the design seed")
    N = profile.N
    A_K = closed_loop_matrix(sys, design.K)
    counts = np.zeros((N, sys.n_h))
    for start in range(0, S_val, chunk):
        count = min(chunk, S_val - start)
        d = draw_disturbance_batch(model, max(N - 1, 1), count, seed=fresh_seed, first_index=start)
        e = propagate_error(A_K, d)[:, :N]
        counts += np.sum(e @ design.C_K.T > profile.q[None], axis=0)
    eps = profile.levels.epsilon
    threshold = eps + 3.0 * np.sqrt(eps * (1.0 - eps) / S_val)
    return ValidationReport(frequency=counts / S_val, threshold=float(threshold),
                            S_val=int(S_val), seed=int(fresh_seed))
