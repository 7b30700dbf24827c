"""Coverage, width and multivalidity reporting over transcripts."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from multivalid.core import BucketGrid, DomainError, GroupSystem, RateFunction
from multivalid.mvp import Transcript


def centered_width(q):
    """Width ``2q`` of an interval centred on a point prediction."""
    return 2.0 * np.asarray(q, dtype=float)


@dataclass(frozen=True)
class CellStats:
    group: str
    bucket: int
    n: int
    coverage: float
    V: float
    normalized_error: float  # |V| / f(n)
    alpha_ref: float  # alpha(n) = f(n) / n
    deviation: float  # |coverage - (1 - delta)|


@dataclass(frozen=True)
class GroupStats:
    n: int
    coverage: float
    mean_width: float


@dataclass
class CoverageReport:
    rounds: int
    delta: float
    marginal_coverage: float
    mean_width: float
    median_width: float
    groups: dict[str, GroupStats]
    cells: list[CellStats]
    threshold_histogram: np.ndarray = field(repr=False)

    @property
    def multivalidity_error(self) -> float:
        return max((c.normalized_error for c in self.cells), default=0.0)

    @property
    def max_deviation_ratio(self) -> float:
        """Largest ``deviation / alpha(n)`` over visited cells."""
        return max((c.deviation / c.alpha_ref for c in self.cells), default=0.0)

    def metrics(self) -> dict[str, float]:
        """Flat scalar metrics used for cross-trial aggregation."""
        out = {
            "marginal_coverage": self.marginal_coverage,
            "mean_width": self.mean_width,
            "median_width": self.median_width,
            "multivalidity_error": self.multivalidity_error,
        }
        for name, g in self.groups.items():
            out[f"coverage[{name}]"] = g.coverage
            out[f"mean_width[{name}]"] = g.mean_width
        return out

    def write_csv(self, fh, comments: Sequence[str] = ()):
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["level", "group", "bucket", "n", "coverage", "mean_width", "V",
                    "normalized_error", "alpha_ref", "deviation"])
        for c in self.cells:
            w.writerow(["cell", c.group, c.bucket, c.n, _fmt(c.coverage), "", _fmt(c.V),
                        _fmt(c.normalized_error), _fmt(c.alpha_ref), _fmt(c.deviation)])
        for name, g in self.groups.items():
            w.writerow(["group", name, "", g.n, _fmt(g.coverage), _fmt(g.mean_width),
                        "", "", "", _fmt(abs(g.coverage - (1 - self.delta)))
                        if g.n else ""])
        w.writerow(["marginal", "", "", self.rounds, _fmt(self.marginal_coverage),
                    _fmt(self.mean_width), "", _fmt(self.multivalidity_error), "",
                    _fmt(abs(self.marginal_coverage - (1 - self.delta)))])

    def to_csv(self, comments: Sequence[str] = ()) -> str:
        buf = io.StringIO()
        self.write_csv(buf, comments)
        return buf.getvalue()

    def table(self) -> str:
        rows = [("group", "n", "coverage", "mean width")]
        rows.append(("(marginal)", str(self.rounds), f"{self.marginal_coverage:.4f}",
                     f"{self.mean_width:.4f}"))
        for name, g in self.groups.items():
            cov = f"{g.coverage:.4f}" if g.n else "-"
            width = f"{g.mean_width:.4f}" if g.n else "-"
            rows.append((name, str(g.n), cov, width))
        return format_table(rows)


def _fmt(x: float) -> str:
    return repr(float(x))


def format_table(rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(c.rjust(w) if j else c.ljust(w)
                               for j, (c, w) in enumerate(zip(r, widths))))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def threshold_histogram(q, grid: BucketGrid) -> np.ndarray:
    """Counts of thresholds per grid point, each threshold rounded to the nearest point."""
    q = np.clip(np.asarray(q, dtype=float), 0.0, 1.0)
    idx = np.rint(q * grid.resolution).astype(int)
    return np.bincount(idx, minlength=grid.resolution + 1)


def _mean(x: np.ndarray) -> float:
    return float(np.mean(x)) if x.size else math.nan


def build_report(transcript: Transcript, groups: GroupSystem | Sequence[str], grid: BucketGrid,
                 delta: float, rate: RateFunction,
                 width_fn: Callable = centered_width) -> CoverageReport:
    """Empirical coverage per group and per (group, bucket) cell.

    Cells that were never visited are left out of the table.
    """
    if len(transcript) == 0:
        raise DomainError("cannot build a report from an empty transcript")
    names = list(groups.names if isinstance(groups, GroupSystem) else groups)
    q = transcript.q
    covered = transcript.covered
    buckets = transcript.buckets
    masks = transcript.masks(len(names))
    widths = np.asarray(width_fn(q), dtype=float)

    group_stats: dict[str, GroupStats] = {}
    cells: list[CellStats] = []
    target = 1.0 - delta
    for j, name in enumerate(names):
        member = masks[:, j]
        n_g = int(member.sum())
        group_stats[name] = GroupStats(n_g, _mean(covered[member].astype(float)),
                                       _mean(widths[member]))
        for i in range(1, grid.m + 1):
            sel = member & (buckets == i)
            n = int(sel.sum())
            if n == 0:
                continue
            hits = int(covered[sel].sum())
            V = hits - target * n
            fn = rate.f(n)
            cells.append(CellStats(name, i, n, hits / n, V, abs(V) / fn, fn / n,
                                   abs(hits / n - target)))
    return CoverageReport(
        rounds=len(transcript),
        delta=delta,
        marginal_coverage=float(covered.mean()),
        mean_width=float(np.mean(widths)),
        median_width=float(np.median(widths)),
        groups=group_stats,
        cells=cells,
        threshold_histogram=threshold_histogram(q, grid),
    )


@dataclass(frozen=True)
class Stability:
    mean_step: float
    histogram: np.ndarray
    top_mass: float  # share of rounds at the trivial threshold q = 1


def threshold_stability(transcript_or_q, grid: BucketGrid | None = None) -> Stability:
    """Mean absolute change between consecutive thresholds and their histogram."""
    q = transcript_or_q.q if isinstance(transcript_or_q, Transcript) else np.asarray(
        transcript_or_q, dtype=float)
    if q.size < 2:
        raise DomainError("threshold stability needs at least two rounds")
    grid = grid or BucketGrid()
    hist = threshold_histogram(q, grid)
    return Stability(float(np.mean(np.abs(np.diff(q)))), hist, float(hist[-1] / q.size))


@dataclass(frozen=True)
class Spread:
    median: float
    q25: float
    q75: float


def quantile(values, p: float) -> float:
    """Linear-interpolation quantile that keeps infinite values infinite."""
    v = np.sort(np.asarray(values, dtype=float))
    pos = p * (v.size - 1)
    lo, frac = int(math.floor(pos)), pos - math.floor(pos)
    if frac == 0 or v[lo] == v[lo + 1]:
        return float(v[lo])
    return float(v[lo] + (v[lo + 1] - v[lo]) * frac)


def aggregate_trials(reports: Sequence[CoverageReport]) -> dict[str, Spread]:
    """Median and inter-quartile range of every scalar metric across trials."""
    if not reports:
        raise DomainError("nothing to aggregate")
    keys = list(reports[0].metrics())
    out = {}
    for key in keys:
        vals = np.array([r.metrics().get(key, math.nan) for r in reports], dtype=float)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            out[key] = Spread(math.nan, math.nan, math.nan)
            continue
        out[key] = Spread(*(quantile(vals, p) for p in (0.5, 0.25, 0.75)))
    return out
