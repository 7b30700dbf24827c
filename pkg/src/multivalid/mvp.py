"""The MultiValid Prediction (MVP) online threshold selector.

Each round the caller reports which groups the current point belongs to,
receives a threshold ``q`` on the ``r*m`` grid, then reveals the realized
conformal score. The predictor keeps, for every (group, bucket) cell, the
number of rounds ``n`` and the number of covered rounds, so that the signed
coverage error ``V = covered - (1 - delta) * n`` is exact.

Example
-------
>>> from multivalid import MVP
>>> mvp = MVP(groups=1, delta=0.1, m=40, seed=0)
>>> rec = mvp.step([True], score=0.3)
>>> rec.t, rec.bucket
(1, 1)
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from multivalid.core import (
    BucketGrid,
    ConfigurationError,
    DomainError,
    GroupSystem,
    RateFunction,
    check_delta,
    compute_eta,
    int_to_mask,
    mask_to_int,
)

log = logging.getLogger(__name__)

NORMALIZED = "normalized"
UNNORMALIZED = "unnormalized"
VARIANTS = (NORMALIZED, UNNORMALIZED)

# exp() overflows just above 709
SATURATION = 700.0


def cover(q: float, s: float) -> bool:
    return s <= q


def coverage_deviation(q: float, s: float, delta: float) -> float:
    """``+delta`` when the threshold covers the score, ``-(1 - delta)`` otherwise."""
    return (1.0 if s <= q else 0.0) - (1.0 - delta)


@dataclass(frozen=True)
class RoundRecord:
    t: int
    group_mask: int
    q: float
    bucket: int
    score: float
    covered: bool

    def active(self, count: int) -> np.ndarray:
        return int_to_mask(self.group_mask, count)


TRANSCRIPT_COLUMNS = ("t", "q", "bucket", "score", "covered", "group_mask")


class Transcript:
    """Ordered list of round records with CSV export.

    Round indices must be strictly increasing. They start at 1 for a fresh
    run; a transcript that excludes warm-start rounds keeps the original
    indices.
    """

    def __init__(self, records: Iterable[RoundRecord] = ()):
        self.records: list[RoundRecord] = []
        for rec in records:
            self.append(rec)

    def append(self, rec: RoundRecord):
        if self.records and rec.t <= self.records[-1].t:
            raise DomainError(f"round index {rec.t} does not follow {self.records[-1].t}")
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[RoundRecord]:
        return iter(self.records)

    def __getitem__(self, idx):
        return self.records[idx]

    def __eq__(self, other):
        return isinstance(other, Transcript) and self.records == other.records

    @property
    def q(self) -> np.ndarray:
        return np.array([r.q for r in self.records], dtype=float)

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=float)

    @property
    def covered(self) -> np.ndarray:
        return np.array([r.covered for r in self.records], dtype=bool)

    @property
    def buckets(self) -> np.ndarray:
        return np.array([r.bucket for r in self.records], dtype=int)

    def masks(self, count: int) -> np.ndarray:
        """Boolean membership matrix of shape (rounds, count)."""
        out = np.zeros((len(self.records), count), dtype=bool)
        for row, rec in enumerate(self.records):
            out[row] = int_to_mask(rec.group_mask, count)
        return out

    def write_csv(self, fh, comments: Sequence[str] = ()):
        for line in comments:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(TRANSCRIPT_COLUMNS)
        for r in self.records:
            writer.writerow([r.t, repr(r.q), r.bucket, repr(r.score), int(r.covered),
                             format(r.group_mask, "x")])

    def to_csv(self, comments: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        self.write_csv(buf, comments)
        return buf.getvalue()

    @classmethod
    def read_csv(cls, fh) -> tuple["Transcript", list[str]]:
        """Parse a transcript CSV; returns the transcript and its comment lines."""
        comments: list[str] = []
        rows = []
        header = None
        for lineno, line in enumerate(fh, start=1):
            if line.startswith("#"):
                comments.append(line[1:].strip())
                continue
            if not line.strip():
                continue
            if header is None:
                header = next(csv.reader([line]))
                if tuple(header) != TRANSCRIPT_COLUMNS:
                    raise DomainError(f"line {lineno}: expected header {','.join(TRANSCRIPT_COLUMNS)}")
                continue
            rows.append((lineno, next(csv.reader([line]))))
        if header is None:
            raise DomainError("transcript CSV has no header row")
        out = cls()
        for lineno, row in rows:
            try:
                t, q, bucket, score, covered, mask = row
                out.append(RoundRecord(int(t), int(mask, 16), float(q), int(bucket),
                                       float(score), bool(int(covered))))
            except ValueError as exc:
                raise DomainError(f"line {lineno}: malformed transcript row {row!r}: {exc}") from exc
        return out, comments


@dataclass
class Decision:
    """How a threshold was chosen: the per-bucket signals and the branch taken."""

    q: float
    k: int
    branch: str  # "all_positive" | "all_negative" | "sign_change"
    signals: np.ndarray
    i_star: int | None = None
    p: float | None = None
    draw: float | None = None


@dataclass
class Diagnostics:
    saturations: int = 0
    branches: dict = field(default_factory=lambda: {"all_positive": 0, "all_negative": 0,
                                                    "sign_change": 0})


class MVP:
    """Online multivalid threshold selection.

    Parameters
    ----------
    groups : GroupSystem or int
        Either a group system (used by :meth:`membership`) or the number of
        groups when the caller computes membership masks itself.
    delta : float
        Target miscoverage; the target coverage is ``1 - delta``.
    m, r : int
        Bucket count and grid refinement.
    epsilon : float
        Exponent in the rate function ``f``.
    eta : float, optional
        Learning rate. Defaults to ``sqrt(ln(|G| m) / (2 K |G| m))``.
    variant : {"normalized", "unnormalized"}
        Whether the bucket signal divides by ``f(n)``.
    seed : int or numpy Generator, optional
        Source of the single uniform draw made on sign-change rounds.
    """

    def __init__(self, groups: GroupSystem | int = 1, delta: float = 0.1, m: int = 40,
                 r: int = 100, epsilon: float = 1.0, eta: float | None = None,
                 variant: str = NORMALIZED, seed=None, rate: RateFunction | None = None):
        if isinstance(groups, GroupSystem):
            self.groups = groups
            self.group_count = len(groups)
        else:
            self.groups = None
            self.group_count = int(groups)
            if self.group_count < 1:
                raise DomainError("need at least one group")
        if variant not in VARIANTS:
            raise DomainError(f"variant must be one of {VARIANTS}, got {variant!r}")
        self.delta = check_delta(delta)
        self.grid = BucketGrid(m, r)
        if m < 2:
            raise ConfigurationError("MVP needs at least two buckets")
        self.rate = rate if rate is not None else RateFunction(epsilon)
        if eta is None:
            eta = compute_eta(self.group_count, m, self.rate.K)
        elif not 0 < eta:
            raise DomainError(f"eta must be positive, got {eta}")
        self.eta = float(eta)
        self.variant = variant
        self.rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.n = np.zeros((self.group_count, m), dtype=np.int64)
        self.hits = np.zeros((self.group_count, m), dtype=np.int64)
        self.t = 0
        self.diagnostics = Diagnostics()

    def __repr__(self):
        return (f"MVP(groups={self.group_count}, delta={self.delta}, m={self.grid.m}, "
                f"r={self.grid.r}, eta={self.eta:.4g}, variant={self.variant!r}, t={self.t})")

    @property
    def V(self) -> np.ndarray:
        """Signed coverage error per (group, bucket), materialized from integer counts."""
        return self.hits - (1.0 - self.delta) * self.n

    def membership(self, x) -> np.ndarray:
        if self.groups is None:
            raise DomainError("this predictor was built without a GroupSystem; pass a mask")
        return self.groups.membership(x)

    def _mask(self, active) -> np.ndarray:
        mask = np.asarray(active, dtype=bool).reshape(-1)
        if mask.shape != (self.group_count,):
            raise DomainError(f"group mask must have {self.group_count} entries, got {mask.shape}")
        return mask

    def _cell_signals(self, rows: np.ndarray) -> np.ndarray:
        # 2 sinh(eta V / f(n)) / f(n), or 2 sinh(eta V) when un-normalized
        n = self.n[rows]
        V = self.hits[rows] - (1.0 - self.delta) * n
        if self.variant == NORMALIZED:
            fn = self.rate.f(n)
            arg = self.eta * V / fn
        else:
            fn = None
            arg = self.eta * V
        saturated = np.abs(arg) > SATURATION
        if saturated.any():
            self.diagnostics.saturations += int(saturated.sum())
            arg = np.clip(arg, -SATURATION, SATURATION)
        out = 2.0 * np.sinh(arg)
        return out / fn if fn is not None else out

    def signals(self, active) -> np.ndarray:
        """``C^i`` for every bucket ``i`` (index ``i - 1``) given the active groups."""
        mask = self._mask(active)
        rows = np.flatnonzero(mask)
        if rows.size == 0:
            return np.zeros(self.grid.m)
        return self._cell_signals(rows).sum(axis=0)

    def bucket_signal(self, active, i: int) -> float:
        if not 1 <= i <= self.grid.m:
            raise DomainError(f"bucket index must lie in 1..{self.grid.m}, got {i}")
        return float(self.signals(active)[i - 1])

    def predict(self, active) -> Decision:
        """Choose this round's threshold.

        All signals strictly positive gives ``q = 0`` and all strictly negative
        gives ``q = 1``. Otherwise the smallest ``i*`` with
        ``C[i*] * C[i*+1] <= 0`` is used, and ``i*/m - 1/(rm)`` is played with
        probability ``|C[i*+1]| / (|C[i*+1]| + |C[i*]|)`` (0/0 read as 1),
        else ``i*/m``.
        """
        C = self.signals(active)
        r, m = self.grid.r, self.grid.m
        if np.all(C > 0):
            self.diagnostics.branches["all_positive"] += 1
            return Decision(0.0, 0, "all_positive", C)
        if np.all(C < 0):
            self.diagnostics.branches["all_negative"] += 1
            return Decision(1.0, r * m, "all_negative", C)
        prods = C[:-1] * C[1:]
        i_star = int(np.flatnonzero(prods <= 0)[0]) + 1
        lo, hi = abs(C[i_star - 1]), abs(C[i_star])
        p = 1.0 if lo + hi == 0 else hi / (hi + lo)
        draw = float(self.rng.random())
        k = i_star * r - 1 if draw < p else i_star * r
        self.diagnostics.branches["sign_change"] += 1
        return Decision(k / (r * m), k, "sign_change", C, i_star=i_star, p=p, draw=draw)

    def update(self, active, q, score: float) -> RoundRecord:
        """Record the realized score for a threshold returned by :meth:`predict`.

        ``q`` may be a :class:`Decision` or a float on the grid.
        """
        if not (0.0 <= score <= 1.0):
            raise DomainError(
                f"score {score!r} is outside [0, 1]; rescale it first (e.g. s/(1+s))")
        mask = self._mask(active)
        k = q.k if isinstance(q, Decision) else self.grid.grid_index(float(q))
        qv = k / self.grid.resolution
        i = self.grid.bucket_of_grid_index(k)
        covered = score <= qv
        rows = np.flatnonzero(mask)
        self.n[rows, i - 1] += 1
        if covered:
            self.hits[rows, i - 1] += 1
        self.t += 1
        return RoundRecord(self.t, mask_to_int(mask), qv, i, float(score), bool(covered))

    def step(self, active, score: float) -> RoundRecord:
        """Predict then update in one call."""
        return self.update(active, self.predict(active), score)

    def run(self, scores: Sequence[float], masks=None) -> Transcript:
        """Play a whole score sequence; ``masks`` defaults to all groups active."""
        out = Transcript()
        everyone = np.ones(self.group_count, dtype=bool)
        for idx, s in enumerate(scores):
            mask = everyone if masks is None else masks[idx]
            out.append(self.step(mask, float(s)))
        return out

    def surrogate_loss(self) -> float:
        """``sum over cells of exp(eta V/f(n)) + exp(-eta V/f(n))``."""
        arg = self.eta * self.V / self.rate.f(self.n)
        arg = np.clip(arg, -SATURATION, SATURATION)
        return float(np.sum(2.0 * np.cosh(arg)))

    def multivalidity_error(self) -> float:
        """``max |V| / f(n)`` over cells that have been visited."""
        seen = self.n > 0
        if not seen.any():
            return 0.0
        return float(np.max(np.abs(self.V[seen]) / self.rate.f(self.n[seen])))

    def bound(self) -> float:
        """``sqrt(4 K |G| m ln(|G| m))``, the expected-error bound for smooth scores."""
        size = self.group_count * self.grid.m
        return float(np.sqrt(4.0 * self.rate.K * size * np.log(size)))
