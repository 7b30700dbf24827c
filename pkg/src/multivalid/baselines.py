"""Comparison methods: split, weighted split, group-conservative split, and ACI."""

from __future__ import annotations

import bisect
import math
from collections import deque
from typing import Mapping, Sequence

import numpy as np

from multivalid.core import ConfigurationError, DomainError

TRIVIAL = math.inf  # threshold of the full label set
EMPTY = -math.inf  # threshold of the empty set


def split_rank(n: int, delta: float) -> int:
    """1-based order statistic ``ceil((1 - delta)(n + 1))``."""
    # round first so that e.g. 0.9 * 11 = 9.9000000000000004 does not tip the ceiling
    return math.ceil(round((1.0 - delta) * (n + 1), 9))


def split_threshold(scores, delta: float) -> float:
    """Split-conformal threshold from ``n`` calibration scores.

    Returns the ``ceil((1 - delta)(n + 1))``-th smallest score, ``inf`` when
    that rank exceeds ``n`` and ``-inf`` when it is 0.
    """
    s = np.asarray(scores, dtype=float).ravel()
    n = s.size
    if n == 0:
        raise ConfigurationError("split conformal needs at least one calibration score")
    k = split_rank(n, delta)
    if k > n:
        return TRIVIAL
    if k <= 0:
        return EMPTY
    return float(np.partition(s, k - 1)[k - 1])


def weighted_split_threshold(scores, weights, delta: float, test_weight: float) -> float:
    """Weighted split-conformal threshold under covariate shift.

    The calibration weights and ``test_weight`` are normalized together; the
    test point carries its mass at ``+inf``. Returns the smallest calibration
    score whose normalized cumulative weight reaches ``1 - delta``, or ``inf``
    when only the test point's mass would get there.
    """
    s = np.asarray(scores, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if s.shape != w.shape:
        raise DomainError("scores and weights differ in length")
    if np.any(w <= 0) or not test_weight > 0:
        raise DomainError("weights must be positive")
    order = np.argsort(s, kind="stable")
    cum = np.cumsum(w[order]) / (w.sum() + test_weight)
    # tolerance keeps equal-weight inputs in step with the integer rank rule
    idx = int(np.searchsorted(cum, (1.0 - delta) - 1e-12, side="left"))
    if idx >= s.size:
        return TRIVIAL
    return float(s[order[idx]])


def group_conservative_threshold(per_group: Mapping[str, float], active: Sequence[str],
                                 marginal: float | None = None) -> float:
    """Largest threshold among the groups a point belongs to."""
    active = list(active)
    if not active:
        if marginal is None:
            raise ConfigurationError("no active group and no marginal threshold to fall back on")
        return marginal
    missing = [g for g in active if g not in per_group]
    if missing:
        raise DomainError(f"no threshold for groups {missing}")
    return max(per_group[g] for g in active)


class SplitCalibrator:
    """A growing calibration multiset kept in sorted order."""

    def __init__(self, delta: float, scores=()):
        self.delta = delta
        self.sorted: list[float] = sorted(float(s) for s in scores)

    def __len__(self):
        return len(self.sorted)

    def add(self, score: float):
        bisect.insort(self.sorted, float(score))

    def threshold(self) -> float:
        n = len(self.sorted)
        if n == 0:
            raise ConfigurationError("split conformal needs at least one calibration score")
        k = split_rank(n, self.delta)
        if k > n:
            return TRIVIAL
        if k <= 0:
            return EMPTY
        return self.sorted[k - 1]


class ACI:
    """Adaptive Conformal Inference on scores in [0, 1].

    The threshold is the empirical ``1 - alpha_t`` quantile of the last
    ``lookback`` scores (linear interpolation), ``1`` when ``alpha_t <= 0``
    and ``0`` when ``alpha_t >= 1``. After the score is revealed,
    ``alpha_t += gamma * (delta - err_t)``. The first ``offset`` rounds are
    marked as burn-in.
    """

    def __init__(self, delta: float = 0.1, gamma: float = 0.005, lookback: int = 100,
                 offset: int = 10):
        if lookback < 1:
            raise ConfigurationError("lookback must be at least 1")
        if offset < 0:
            raise ConfigurationError("offset cannot be negative")
        self.delta = delta
        self.gamma = gamma
        self.lookback = lookback
        self.offset = offset
        self.alpha = delta
        self.window: deque[float] = deque(maxlen=lookback)
        self.t = 0

    @property
    def burning_in(self) -> bool:
        """True while the round about to be played is inside the burn-in."""
        return self.t < self.offset

    def predict(self) -> float:
        if not self.window or self.alpha <= 0:
            return 1.0
        if self.alpha >= 1:
            return 0.0
        return float(np.quantile(np.fromiter(self.window, float), 1.0 - self.alpha))

    def update(self, q: float, score: float) -> int:
        err = int(score > q)
        self.alpha += self.gamma * (self.delta - err)
        self.window.append(float(score))
        self.t += 1
        return err


def aci_step(state: ACI, score: float) -> tuple[float, ACI]:
    q = state.predict()
    state.update(q, score)
    return q, state
