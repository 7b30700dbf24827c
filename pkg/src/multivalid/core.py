"""Bucket grid arithmetic, the rate function f(n) and the derived constants.

Everything here is a pure function of its arguments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
from scipy.integrate import quad


class DomainError(ValueError):
    """An argument lies outside the domain of an operation."""


class ConfigurationError(ValueError):
    """A parameter combination cannot be used to build a predictor or run."""


# snapping tolerance for float thresholds that sit on a bucket edge
_EDGE_TOL = 1e-9


def check_delta(delta: float) -> float:
    delta = float(delta)
    if not 0.0 < delta < 1.0:
        raise DomainError(f"miscoverage rate delta must lie in (0, 1), got {delta}")
    return delta


@dataclass(frozen=True)
class BucketGrid:
    """``m`` calibration buckets over [0, 1] refined into ``r*m`` grid steps.

    Bucket ``i`` (1-based) is ``[(i-1)/m, i/m)``; the last bucket is closed.
    Playable thresholds are the ``r*m + 1`` points ``k/(r*m)``.
    """

    m: int = 40
    r: int = 100

    def __post_init__(self):
        if int(self.m) != self.m or self.m < 1:
            raise ConfigurationError(f"bucket count m must be a positive integer, got {self.m}")
        if int(self.r) != self.r or self.r < 1:
            raise ConfigurationError(f"grid refinement r must be a positive integer, got {self.r}")

    @property
    def resolution(self) -> int:
        """Number of grid steps ``r*m``."""
        return self.r * self.m

    def threshold(self, k: int) -> float:
        """Threshold value of grid point ``k``."""
        return k / self.resolution

    def grid_index(self, q: float) -> int:
        """Index ``k`` with ``q == k/(r*m)``; raises if ``q`` is off the grid."""
        k = round(q * self.resolution)
        if not 0 <= k <= self.resolution or abs(k - q * self.resolution) > 1e-6:
            raise DomainError(f"threshold {q!r} is not a point of the {self.resolution}-step grid")
        return int(k)

    def bucket_of_grid_index(self, k: int) -> int:
        return min(k // self.r + 1, self.m)

    def bucket_bounds(self, i: int) -> tuple[float, float]:
        return (i - 1) / self.m, i / self.m

    def grid(self) -> np.ndarray:
        return np.arange(self.resolution + 1) / self.resolution


def bucket_index(q: float, grid: BucketGrid) -> int:
    """Return the 1-based bucket containing threshold ``q``."""
    if not (0.0 <= q <= 1.0):
        raise DomainError(f"threshold must lie in [0, 1], got {q!r}")
    scaled = Fraction(q) * grid.m
    nearest = round(scaled)
    if abs(float(scaled - nearest)) < _EDGE_TOL:
        # q sits on an edge up to float noise: it opens the bucket to its right
        i = int(nearest) + 1
    else:
        i = math.floor(scaled) + 1
    return min(i, grid.m)


@dataclass(frozen=True)
class RateFunction:
    """The family ``f(n) = sqrt((n+1) log2^(1+eps)(n+2))`` and ``alpha(n) = f(n)/n``.

    The logarithm is base 2 so that ``f(n) >= 1`` for every ``n >= 0``.
    """

    epsilon: float = 1.0
    tol: float = 1e-6
    K: float = field(init=False)

    def __post_init__(self):
        if not self.epsilon > 0:
            raise DomainError(f"epsilon must be positive, got {self.epsilon}")
        object.__setattr__(self, "K", compute_K_epsilon(self.epsilon, self.tol))

    def f(self, n):
        return rate_f(n, self.epsilon)

    def alpha(self, n):
        n = np.asarray(n, dtype=float)
        if np.any(n < 1):
            raise DomainError("alpha(n) is defined for n >= 1")
        out = rate_f(n, self.epsilon) / n
        return float(out) if out.ndim == 0 else out


def rate_f(n, epsilon: float = 1.0):
    """``sqrt((n+1) * log2(n+2)**(1+epsilon))``; accepts scalars or arrays."""
    arr = np.asarray(n, dtype=float)
    if np.any(arr < 0):
        raise DomainError("f(n) is defined for n >= 0")
    out = np.sqrt((arr + 1.0) * np.log2(arr + 2.0) ** (1.0 + epsilon))
    return float(out) if out.ndim == 0 else out


def _summand(n: int, epsilon: float) -> float:
    return 1.0 / ((n + 1) * math.log2(n + 2) ** (1.0 + epsilon))


def partial_sum(N: int, epsilon: float) -> float:
    """Sum of ``1/f(n)^2`` over ``n = 0 .. N-1``."""
    return math.fsum(_summand(n, epsilon) for n in range(N))


def tail_integral(N: int, epsilon: float) -> float:
    """``integral_N^inf dx / ((x+1) log2^(1+eps)(x+2))``.

    With ``u = x + 2`` the integrand splits into ``1/(u log2^(1+eps) u)``, which
    integrates in closed form, plus ``1/(u (u-1) log2^(1+eps) u)``, which decays
    like ``u^-2`` and is left to quadrature.
    """
    a = N + 2.0
    closed = math.log(2.0) / (epsilon * math.log2(a) ** epsilon)
    rest, _ = quad(lambda u: 1.0 / (u * (u - 1.0) * math.log2(u) ** (1.0 + epsilon)),
                   a, math.inf, epsabs=1e-15, epsrel=1e-12, limit=200)
    return closed + rest


def tail_bound(N: int, epsilon: float) -> float:
    """Upper bound on ``sum_{n >= N} 1/f(n)^2`` for a decreasing summand."""
    return _summand(N, epsilon) + tail_integral(N, epsilon)


def _cutoff(epsilon: float, tol: float) -> int:
    # smallest power of two with the summand below 2*tol, so that the
    # midpoint of [S_N + I_N, S_N + I_N + g(N)] is within tol of the series
    N = 16
    while _summand(N, epsilon) > 2.0 * tol:
        N *= 2
    return N


def K_epsilon_bracket(epsilon: float, tol: float = 1e-6) -> tuple[int, float, float, float]:
    """Return ``(N, lower, estimate, upper)`` with ``lower <= K <= upper``."""
    if not epsilon > 0:
        raise DomainError(f"the series diverges for epsilon <= 0 (got {epsilon})")
    if not tol > 0:
        raise DomainError(f"tolerance must be positive, got {tol}")
    N = _cutoff(epsilon, tol)
    s = partial_sum(N, epsilon)
    integral = tail_integral(N, epsilon)
    g = _summand(N, epsilon)
    return N, s + integral, s + integral + 0.5 * g, s + integral + g


def compute_K_epsilon(epsilon: float = 1.0, tol: float = 1e-6) -> float:
    """``K_eps = sum_{n >= 0} 1/f(n)^2`` to within ``tol``."""
    return K_epsilon_bracket(epsilon, tol)[2]


def compute_eta(group_count: int, m: int, K: float) -> float:
    """Learning rate ``sqrt(ln(|G| m) / (2 K |G| m))``, kept strictly below 1/2."""
    size = group_count * m
    if size < 2:
        raise ConfigurationError(
            f"|G|*m = {size} makes the default eta degenerate; pass eta explicitly"
        )
    if K < 1:
        raise DomainError(f"K must be at least 1, got {K}")
    eta = math.sqrt(math.log(size) / (2.0 * K * size))
    return min(eta, math.nextafter(0.5, 0.0))


Predicate = Callable[[np.ndarray], bool]


class GroupSystem:
    """An ordered, named collection of membership predicates over feature vectors.

    Groups may intersect arbitrarily. ``membership`` returns a boolean mask
    aligned with ``names``.
    """

    def __init__(self, groups: Sequence[tuple[str, Predicate]]):
        groups = list(groups)
        if not groups:
            raise ConfigurationError("a group system needs at least one group")
        names = [name for name, _ in groups]
        if len(set(names)) != len(names):
            raise ConfigurationError("group names must be unique")
        self.names = names
        self.predicates = [pred for _, pred in groups]

    def __len__(self):
        return len(self.names)

    def __repr__(self):
        return f"GroupSystem({self.names!r})"

    def membership(self, x) -> np.ndarray:
        return np.fromiter((bool(p(x)) for p in self.predicates), dtype=bool, count=len(self))

    def membership_matrix(self, X) -> np.ndarray:
        """Row-wise membership for a batch of feature vectors."""
        return np.array([self.membership(x) for x in X], dtype=bool).reshape(len(X), len(self))

    @classmethod
    def everything(cls, name: str = "all") -> "GroupSystem":
        """The single group containing every point (plain marginal coverage)."""
        return cls([(name, lambda x: True)])


def mask_to_int(active) -> int:
    """Pack a boolean group mask into an integer, bit ``j`` for group ``j``."""
    return sum(1 << j for j, a in enumerate(active) if a)


def int_to_mask(value: int, count: int) -> np.ndarray:
    return np.array([(value >> j) & 1 for j in range(count)], dtype=bool)
