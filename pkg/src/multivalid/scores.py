"""Conformal score adapters, score rescaling and an online least-squares model."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from multivalid.core import DomainError

ABS_RESIDUAL = "abs_residual"
QUANTILE_PAIR = "quantile_pair"
CLASS_CUMULATIVE = "class_cumulative"
PRECOMPUTED = "precomputed"
KINDS = (ABS_RESIDUAL, QUANTILE_PAIR, CLASS_CUMULATIVE, PRECOMPUTED)


def abs_residual_score(prediction: float, y: float) -> float:
    return abs(prediction - y)


def cqr_score(lo: float, hi: float, y: float) -> float:
    """Conformalized quantile regression score; negative inside ``[lo, hi]``."""
    if lo > hi:
        raise DomainError(f"lower quantile {lo} exceeds upper quantile {hi}")
    return max(lo - y, y - hi)


def _check_simplex(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=float)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
        raise DomainError("class probabilities must be a nonnegative vector summing to 1")
    return p


def _rank_order(p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # descending probability, ties by ascending label index
    order = np.lexsort((np.arange(p.size), -p))
    return order, np.minimum(np.cumsum(p[order]), 1.0)


def class_cumulative_score(probs, y: int) -> float:
    """Probability mass of the labels ranked at or above ``y``."""
    p = _check_simplex(probs)
    if not 0 <= y < p.size:
        raise DomainError(f"label {y} is not in 0..{p.size - 1}")
    order, cum = _rank_order(p)
    return float(cum[int(np.flatnonzero(order == y)[0])])


def rescale_unbounded(s):
    """Map ``[0, inf)`` onto ``[0, 1)`` by ``s / (1 + s)``."""
    arr = np.asarray(s, dtype=float)
    if np.any(arr < 0):
        raise DomainError("only nonnegative scores can be rescaled")
    out = arr / (1.0 + arr)
    return float(out) if out.ndim == 0 else out


def unrescale(q):
    """Inverse of :func:`rescale_unbounded`; ``q = 1`` maps to ``inf``."""
    arr = np.asarray(q, dtype=float)
    if np.any((arr < 0) | (arr > 1)):
        raise DomainError("rescaled thresholds lie in [0, 1]")
    out = np.divide(arr, 1.0 - arr, out=np.full_like(arr, np.inf), where=arr < 1.0)
    return float(out) if out.ndim == 0 else out


def smooth_score(s: float, noise_width: float, rng: np.random.Generator) -> float:
    """Add ``Uniform(0, noise_width)`` to a score in [0, 1] and clamp at 1."""
    if not 0.0 <= s <= 1.0:
        raise DomainError(f"score {s} is outside [0, 1]")
    if not noise_width > 0:
        raise DomainError("noise width must be positive")
    return min(s + noise_width * rng.random(), 1.0)


@dataclass
class PredictionSet:
    """A prediction set in label space.

    ``interval`` is set for regression adapters, ``labels`` for
    classification. ``unbounded`` marks the trivial set produced by the top
    threshold under rescaled scores.
    """

    interval: tuple[float, float] | None = None
    labels: tuple[int, ...] | None = None
    unbounded: bool = False

    @property
    def width(self) -> float:
        if self.unbounded:
            return math.inf
        if self.interval is not None:
            return self.interval[1] - self.interval[0]
        return float(len(self.labels))

    def __contains__(self, y) -> bool:
        if self.unbounded:
            return True
        if self.interval is not None:
            return self.interval[0] <= y <= self.interval[1]
        return y in self.labels


def invert_to_interval(kind: str, q: float, *, prediction: float | None = None,
                       lo: float | None = None, hi: float | None = None, probs=None,
                       rescaled: bool = False) -> PredictionSet:
    """Turn a threshold into the set ``{y : s(x, y) <= q}`` for a score adapter."""
    if not 0.0 <= q <= 1.0:
        raise DomainError(f"threshold {q} is outside [0, 1]")
    if kind == CLASS_CUMULATIVE:
        p = _check_simplex(probs)
        order, cum = _rank_order(p)
        take = int(np.searchsorted(cum, q, side="right"))
        return PredictionSet(labels=tuple(int(j) for j in order[:take]))
    if rescaled and q >= 1.0:
        return PredictionSet(unbounded=True)
    radius = unrescale(q) if rescaled else q
    if kind == ABS_RESIDUAL:
        return PredictionSet(interval=(prediction - radius, prediction + radius))
    if kind == QUANTILE_PAIR:
        if lo > hi:
            raise DomainError(f"lower quantile {lo} exceeds upper quantile {hi}")
        return PredictionSet(interval=(lo - radius, hi + radius))
    raise DomainError(f"no prediction-set inversion for score kind {kind!r}")


def interval_width(q, rescaled: bool = False):
    """Width ``2q`` of a centred interval (after undoing the rescaling if any)."""
    q = np.asarray(q, dtype=float)
    out = 2.0 * (unrescale(q) if rescaled else q)
    return float(out) if np.ndim(out) == 0 else out


class OnlineLeastSquares:
    """Ridge regression updated one point at a time.

    Keeps ``P = (X^T X + ridge I)^-1`` through Sherman-Morrison rank-one
    updates, so each update costs O(d^2). With no data the prediction is 0.
    """

    def __init__(self, dim: int, ridge: float = 1e-6):
        if ridge <= 0:
            raise DomainError("ridge must be positive")
        self.dim = dim
        self.ridge = ridge
        self.P = np.eye(dim) / ridge
        self.moment = np.zeros(dim)
        self.weights = np.zeros(dim)
        self.count = 0

    def update(self, x, y: float) -> "OnlineLeastSquares":
        x = np.asarray(x, dtype=float)
        if x.shape != (self.dim,):
            raise DomainError(f"expected a feature vector of length {self.dim}, got {x.shape}")
        u = self.P @ x
        # outer(u, u) is exactly symmetric, so P stays symmetric
        self.P -= np.outer(u, u) / (1.0 + x @ u)
        self.moment += y * x
        self.weights = self.P @ self.moment
        self.count += 1
        return self

    def predict(self, X):
        return np.asarray(X, dtype=float) @ self.weights


def ols_update(model: OnlineLeastSquares, x, y: float) -> OnlineLeastSquares:
    return model.update(x, y)
