"""Order statistics and sample-complexity bounds for probabilistic validation.

The core fact used throughout: if ``S`` i.i.d. draws of a scalar ``v`` are
sorted non-increasingly and the ``r``-th largest is kept as a bound, the
probability that this bound is violated more often than ``epsilon`` is at
most the binomial tail ``sum_{m<r} C(S, m) eps^m (1 - eps)^(S - m)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ProbabilisticLevels:
    epsilon: float
    delta: float
    r: int
    multiplicity: int = 1

    def __post_init__(self):
        if not 0.0 < self.epsilon < 1.0:
            raise ValueError(f"epsilon must lie in (0, 1), got {self.epsilon}")
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if int(self.r) != self.r or self.r < 1:
            raise ValueError(f"discarding parameter r must be a positive integer, got {self.r}")
        if int(self.multiplicity) != self.multiplicity or self.multiplicity < 1:
            raise ValueError(f"multiplicity must be a positive integer, got {self.multiplicity}")
        object.__setattr__(self, "r", int(self.r))
        object.__setattr__(self, "multiplicity", int(self.multiplicity))

    def to_dict(self) -> dict:
        return {"epsilon": self.epsilon, "delta": self.delta, "r": self.r,
                "multiplicity": self.multiplicity}


class OrderedSample:
    """A finite sample together with its non-increasing sorted view."""

    def __init__(self, values):
        self.values = np.asarray(values, dtype=float).reshape(-1)
        if self.values.size == 0:
            raise ValueError("sample must contain at least one value")
        self.sorted = np.sort(self.values)[::-1]

    def __len__(self):
        return self.values.size


def generalized_max(sample, r: int) -> float:
    """The ``r``-th largest value of ``sample`` (ties counted with multiplicity).

    ``r = 1`` is the maximum, ``r = len(sample)`` the minimum.
    """
    if isinstance(sample, OrderedSample):
        values = sample.sorted
        if not 1 <= r <= values.size:
            raise ValueError(f"r must lie in [1, {values.size}], got {r}")
        return float(values[r - 1])
    values = np.asarray(sample, dtype=float).reshape(-1)
    if not 1 <= r <= values.size:
        raise ValueError(f"r must lie in [1, {values.size}], got {r}")
    return float(-np.partition(-values, r - 1)[r - 1])


def generalized_max_columns(values, r: int) -> np.ndarray:
    """Column-wise :func:`generalized_max` over axis 0 of a 2-d array."""
    values = np.asarray(values, dtype=float)
    S = values.shape[0]
    if not 1 <= r <= S:
        raise ValueError(f"r must lie in [1, {S}], got {r}")
    return -np.partition(-values, r - 1, axis=0)[r - 1]


def binomial_tail(S: int, r: int, epsilon: float) -> float:
    """``P[Binomial(S, epsilon) <= r - 1]``, summed in log space."""
    if not 1 <= r <= S:
        raise ValueError(f"r must lie in [1, S], got r={r}, S={S}")
    if not 0.0 < epsilon < 1.0:
        raise ValueError(f"epsilon must lie in (0, 1), got {epsilon}")
    log_eps = math.log(epsilon)
    log_one_minus = math.log1p(-epsilon)
    log_ratio = log_eps - log_one_minus
    # term_{m+1} / term_m = (S - m) / (m + 1) * eps / (1 - eps)
    log_terms = np.empty(r)
    log_terms[0] = S * log_one_minus
    for m in range(r - 1):
        log_terms[m + 1] = log_terms[m] + math.log((S - m) / (m + 1)) + log_ratio
    peak = log_terms.max()
    total = math.exp(peak) * math.fsum(np.exp(log_terms - peak))
    return min(1.0, max(0.0, total))


def sample_bound(epsilon: float, delta: float, r: int, multiplicity: int = 1) -> float:
    """Real-valued closed-form sample count (before rounding up)."""
    log_term = math.log(multiplicity / delta)
    return (r - 1 + log_term + math.sqrt(2.0 * (r - 1) * log_term)) / epsilon


def sample_complexity(levels: ProbabilisticLevels) -> int:
    """Smallest integer ``S`` meeting the closed-form sufficient bound.

    ``delta`` is split evenly over ``levels.multiplicity`` events (union bound).
    """
    bound = sample_bound(levels.epsilon, levels.delta, levels.r, levels.multiplicity)
    S = math.ceil(bound)
    # the bound is at least r whenever it is valid; keep r <= S regardless
    return max(S, levels.r)


def min_sample_size_exact(epsilon: float, delta_over_multiplicity: float, r: int) -> int:
    """Smallest ``S >= r`` with ``binomial_tail(S, r, epsilon) <= delta_over_multiplicity``.

    Found by doubling then bisection; the tail is non-increasing in ``S``.
    """
    if binomial_tail(r, r, epsilon) <= delta_over_multiplicity:
        return r
    lo, hi = r, 2 * r
    while binomial_tail(hi, r, epsilon) > delta_over_multiplicity:
        lo, hi = hi, 2 * hi
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if binomial_tail(mid, r, epsilon) <= delta_over_multiplicity:
            hi = mid
        else:
            lo = mid
    return hi


def discarding_from_ratio(epsilon: float, delta: float, multiplicity: int,
                          ratio: float = 0.5) -> int:
    """Largest ``r`` whose sample count keeps ``r / S <= ratio * epsilon``.

    With ``ratio = 0.5`` this is the ``r/S ~ epsilon/2`` rule of thumb.
    """
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    r = 1
    while True:
        nxt = r + 1
        S = sample_complexity(ProbabilisticLevels(epsilon, delta, nxt, multiplicity))
        if nxt / S > ratio * epsilon:
            return r
        r = nxt
