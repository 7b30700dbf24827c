"""Synthetic data streams for the benchmark experiments.

Every generator takes a ``seed`` (int, ``SeedSequence`` or ``Generator``)
and is replayable: the same seed gives the same stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from multivalid.core import DomainError, GroupSystem

DEFAULT_GROUP_SIGMA2 = (3.0,) + (0.1,) * 9
DEFAULT_BETA = (-1.0, 0.0, 0.0, 0.0, 1.0)
SORTED_T = 5283


def as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


@dataclass
class Stream:
    """A finite data stream: either (features, label) pairs or (t, score) pairs."""

    features: np.ndarray | None = None
    labels: np.ndarray | None = None
    scores: np.ndarray | None = None
    theta: np.ndarray | None = None
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.scores is None and (self.features is None or self.labels is None):
            raise DomainError("a stream needs scores or features with labels")

    @property
    def is_regression(self) -> bool:
        return self.labels is not None

    def __len__(self):
        return len(self.labels) if self.is_regression else len(self.scores)

    def __iter__(self) -> Iterator[tuple]:
        if self.is_regression:
            return iter(zip(self.features, self.labels))
        return iter(zip(range(1, len(self.scores) + 1), self.scores))

    def __eq__(self, other):
        if not isinstance(other, Stream):
            return NotImplemented
        return all(_same(getattr(self, k), getattr(other, k))
                   for k in ("features", "labels", "scores"))


def _same(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


def linear_features(T: int, rng: np.random.Generator, n_binary: int = 10,
                    n_continuous: int = 290, sigma_x2: float = 0.1) -> np.ndarray:
    """Uniform {0, 1} features followed by N(0, sigma_x2) features."""
    binary = rng.integers(0, 2, size=(T, n_binary)).astype(float)
    cont = rng.normal(0.0, math.sqrt(sigma_x2), size=(T, n_continuous))
    return np.hstack([binary, cont])


def gen_iid_linear(T: int, sigma_x2: float = 0.1, sigma_y2: float = 0.2, seed=None,
                   n_binary: int = 10, n_continuous: int = 290) -> Stream:
    """``y = <theta, x> + N(0, sigma_y2)`` with ``theta ~ N(0, I)`` drawn once."""
    if T < 1:
        raise DomainError("T must be at least 1")
    rng = as_rng(seed)
    d = n_binary + n_continuous
    theta = rng.normal(size=d)
    X = linear_features(T, rng, n_binary, n_continuous, sigma_x2)
    noise = rng.normal(0.0, 1.0, size=T) * math.sqrt(sigma_y2)
    return Stream(features=X, labels=X @ theta + noise, theta=theta)


def binary_feature_groups(n_binary: int = 10) -> GroupSystem:
    """Groups ``G_0 .. G_{2n-1}``; ``G_i`` holds points whose binary feature
    number ``ceil((i+1)/2)`` (1-based) has the parity of ``i``."""
    groups = []
    for i in range(2 * n_binary):
        col = math.ceil((i + 1) / 2) - 1
        groups.append((f"G{i}", lambda x, c=col, v=i % 2: int(x[c]) % 2 == v))
    return GroupSystem(groups)


def binary_membership(X: np.ndarray, n_binary: int = 10) -> np.ndarray:
    """Vectorized membership matrix for :func:`binary_feature_groups`."""
    out = np.empty((len(X), 2 * n_binary), dtype=bool)
    for i in range(2 * n_binary):
        col = math.ceil((i + 1) / 2) - 1
        out[:, i] = X[:, col].astype(int) % 2 == i % 2
    return out


def gen_group_noise(T: int, sigma2: float = 0.2,
                    group_sigma2: Sequence[float] = DEFAULT_GROUP_SIGMA2, seed=None,
                    sigma_x2: float = 0.1, n_continuous: int = 290
                    ) -> tuple[Stream, GroupSystem]:
    """Linear model whose noise variance is ``sigma2 + sum_i group_sigma2[i] * x_i``
    over the binary features; returns the stream and its 20 groups."""
    if T < 1:
        raise DomainError("T must be at least 1")
    rng = as_rng(seed)
    n_binary = len(group_sigma2)
    d = n_binary + n_continuous
    theta = rng.normal(size=d)
    X = linear_features(T, rng, n_binary, n_continuous, sigma_x2)
    var = sigma2 + X[:, :n_binary] @ np.asarray(group_sigma2, dtype=float)
    y = X @ theta + rng.normal(size=T) * np.sqrt(var)
    return Stream(features=X, labels=y, theta=theta), binary_feature_groups(n_binary)


def gen_sorted_scores(T: int = SORTED_T, max_score: float = 0.5) -> Stream:
    """Scores rising linearly from 0 to ``max_score`` in ``T`` equal steps."""
    if T < 2:
        raise DomainError("the sorted sequence needs T >= 2")
    return Stream(scores=max_score * np.arange(T) / (T - 1))


def gen_mod_groups(count: int = 20) -> GroupSystem:
    """``G_j`` holds the rounds ``t`` divisible by ``j``; features are ``[t]``."""
    if count < 1:
        raise DomainError("need at least one group")
    return GroupSystem([(f"G{j}", lambda x, j=j: int(x[0]) % j == 0)
                        for j in range(1, count + 1)])


def mod_membership(T: int, count: int = 20, start: int = 1) -> np.ndarray:
    t = np.arange(start, start + T)[:, None]
    return t % np.arange(1, count + 1)[None, :] == 0


def gen_returns(T: int, seed=None, persistence: float = 0.98, vol_of_vol: float = 0.15,
                base_vol: float = 0.03) -> np.ndarray:
    """Daily returns with AR(1) log-volatility (a stochastic-volatility series)."""
    rng = as_rng(seed)
    h = np.empty(T)
    h[0] = 0.0
    shocks = rng.normal(size=T) * vol_of_vol
    for t in range(1, T):
        h[t] = persistence * h[t - 1] + shocks[t]
    return base_vol * np.exp(h) * rng.normal(size=T)


def add_mod_group_noise(returns: np.ndarray, count: int, seed=None, scale=None) -> np.ndarray:
    """Add an independent ``N(0, scale)`` draw for every group ``G_j`` containing ``t``.

    ``scale`` defaults to the empirical standard deviation of ``returns``.
    """
    rng = as_rng(seed)
    scale = float(np.std(returns)) if scale is None else scale
    member = mod_membership(len(returns), count)
    noise = rng.normal(0.0, scale, size=member.shape) * member
    return returns + noise.sum(axis=1)


def volatility_scores(returns: np.ndarray, decay: float = 0.94, warmup: int = 20) -> np.ndarray:
    """Normalized volatility residuals ``|r_t^2 - v_t| / v_t``.

    ``v_t`` is an exponentially weighted forecast of the squared return from
    data before ``t``, seeded with the mean of the first ``warmup`` squares,
    which are not scored. Returns ``len(returns) - warmup`` scores.
    """
    r2 = np.asarray(returns, dtype=float) ** 2
    if len(r2) <= warmup:
        raise DomainError("series shorter than the forecaster warm-up")
    v = float(np.mean(r2[:warmup]))
    out = np.empty(len(r2) - warmup)
    for k, t in enumerate(range(warmup, len(r2))):
        out[k] = abs(r2[t] - v) / v
        v = decay * v + (1.0 - decay) * r2[t]
    return out


def gen_volatility_scores(T: int, seed=None, group_count: int = 0, warmup: int = 20) -> Stream:
    """Raw (unbounded) volatility scores, optionally with mod-divisibility noise."""
    rng = as_rng(seed)
    returns = gen_returns(T + warmup, rng)
    if group_count:
        # groups are indexed by scored round, so shift the noise past the warm-up
        noisy = add_mod_group_noise(returns[warmup:], group_count, rng)
        returns = np.concatenate([returns[:warmup], noisy])
    return Stream(scores=volatility_scores(returns, warmup=warmup))


def gen_shift_base(N: int = 1503, d: int = 5, sigma_y2: float = 0.2, hetero: float = 0.5,
                   seed=None) -> Stream:
    """A small tabular regression set for covariate-shift runs.

    Features are standard normal; the noise standard deviation is
    ``sqrt(sigma_y2) * exp(hetero * x_d)`` so a shift along the last feature
    changes the residual distribution.
    """
    rng = as_rng(seed)
    theta = rng.normal(size=d)
    X = rng.normal(size=(N, d))
    sd = math.sqrt(sigma_y2) * np.exp(hetero * X[:, -1])
    return Stream(features=X, labels=X @ theta + sd * rng.normal(size=N), theta=theta)


def shift_weights(X: np.ndarray, beta: Sequence[float]) -> np.ndarray:
    """Likelihood ratio ``exp(x^T beta)`` over the first ``len(beta)`` features."""
    beta = np.asarray(beta, dtype=float)
    X = np.asarray(X, dtype=float)
    if X.shape[-1] < beta.size:
        raise DomainError(f"features have {X.shape[-1]} columns, beta needs {beta.size}")
    return np.exp(X[..., : beta.size] @ beta)


def rejection_resample(weights: np.ndarray, size: int, seed=None) -> np.ndarray:
    """Indices drawn with replacement with probability proportional to ``weights``,
    by proposing uniformly and accepting with ``w / max(w)``."""
    rng = as_rng(seed)
    w = np.asarray(weights, dtype=float)
    accept_p = w / w.max()
    out = np.empty(size, dtype=int)
    filled = 0
    while filled < size:
        batch = max(64, 2 * (size - filled))
        prop = rng.integers(0, w.size, size=batch)
        keep = prop[rng.random(batch) < accept_p[prop]]
        take = min(keep.size, size - filled)
        out[filled:filled + take] = keep[:take]
        filled += take
    return out


def gen_covariate_shift(base: Stream, beta: Sequence[float] = DEFAULT_BETA, seed=None,
                        size: int | None = None) -> tuple[Stream, np.ndarray]:
    """Resample ``base`` with replacement in proportion to ``exp(x^T beta)``.

    Returns the shifted stream and the chosen row indices.
    """
    if not base.is_regression:
        raise DomainError("covariate shift needs a feature stream")
    idx = rejection_resample(shift_weights(base.features, beta),
                             len(base) if size is None else size, seed)
    return Stream(features=base.features[idx], labels=base.labels[idx], theta=base.theta), idx

SyntheticStream = Stream
