import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from multivalid.core import BucketGrid, DomainError, GroupSystem, RateFunction
from multivalid.metrics import (
    aggregate_trials,
    build_report,
    centered_width,
    quantile,
    threshold_stability,
)
from multivalid.mvp import MVP, RoundRecord, Transcript

GRID = BucketGrid(40, 100)
RATE = RateFunction()


def _transcript(q, s, masks=None):
    masks = [1] * len(q) if masks is None else masks
    return Transcript(RoundRecord(t + 1, int(g), float(qq), GRID.bucket_of_grid_index(
        int(round(qq * GRID.resolution))), float(ss), bool(ss <= qq))
        for t, (qq, ss, g) in enumerate(zip(q, s, masks)))


def test_four_round_example():
    tr = _transcript([0.5] * 4, [0.1, 0.2, 0.3, 0.9])
    rep = build_report(tr, ["all"], GRID, 0.1, RATE)
    (cell,) = rep.cells
    assert cell.coverage == 0.75
    assert cell.V == pytest.approx(-0.6, abs=1e-12)
    assert cell.deviation == pytest.approx(0.15, abs=1e-12)
    assert cell.normalized_error == pytest.approx(0.6 / RATE.f(4), rel=1e-12)
    assert rep.groups["all"].mean_width == 1.0


def test_all_covered_and_empty():
    rep = build_report(_transcript([1.0] * 5, [0.2] * 5), ["all"], GRID, 0.1, RATE)
    assert rep.marginal_coverage == 1.0
    with pytest.raises(DomainError):
        build_report(Transcript(), ["all"], GRID, 0.1, RATE)


def test_unvisited_cells_are_absent():
    rep = build_report(_transcript([0.5, 0.5], [0.1, 0.1], [0b01, 0b01]), ["a", "b"],
                       GRID, 0.1, RATE)
    assert [(c.group, c.bucket) for c in rep.cells] == [("a", 21)]
    assert rep.groups["b"].n == 0 and math.isnan(rep.groups["b"].coverage)


def _scan(tr, names, delta):
    """Direct per-round rescan of a transcript, independent of the report code."""
    stats = {}
    for rec in tr:
        for j, name in enumerate(names):
            if rec.group_mask >> j & 1:
                for key in ((name, None), (name, rec.bucket)):
                    n, h, w = stats.get(key, (0, 0, 0.0))
                    stats[key] = (n + 1, h + (rec.score <= rec.q), w + 2 * rec.q)
    return stats


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 3), st.integers(1, 2000))
def test_report_matches_transcript_scan(seed, groups, T):
    rng = np.random.default_rng(seed)
    names = [f"g{j}" for j in range(groups)]
    masks = rng.random((T, groups)) < 0.7
    tr = MVP(groups, seed=seed).run(rng.random(T), masks)
    rep = build_report(tr, names, GRID, 0.1, RATE)
    scan = _scan(tr, names, 0.1)
    for name in names:
        n, h, w = scan.get((name, None), (0, 0, 0.0))
        g = rep.groups[name]
        assert g.n == n
        if n:
            assert g.coverage == pytest.approx(h / n, abs=1e-12)
            assert g.mean_width == pytest.approx(w / n, rel=1e-9)
    assert sum(c.n for c in rep.cells) == sum(g.n for g in rep.groups.values())
    for c in rep.cells:
        n, h, _ = scan[(c.group, c.bucket)]
        assert (c.n, c.coverage) == (n, pytest.approx(h / n, abs=1e-12))
        assert c.coverage == pytest.approx(c.V / c.n + 0.9, abs=1e-12)
    assert rep.marginal_coverage == pytest.approx(np.mean([r.covered for r in tr]))


def test_report_matches_scan_at_length_1e4():
    rng = np.random.default_rng(5)
    T = 10_000
    masks = rng.random((T, 3)) < 0.5
    tr = MVP(3, seed=5).run(rng.random(T), masks)
    names = ["a", "b", "c"]
    rep = build_report(tr, names, GRID, 0.1, RATE)
    scan = _scan(tr, names, 0.1)
    for c in rep.cells:
        n, h, _ = scan[(c.group, c.bucket)]
        assert c.n == n and c.coverage == pytest.approx(h / n, abs=1e-12)


def test_partition_weighted_coverage_equals_marginal():
    rng = np.random.default_rng(2)
    T = 3000
    x = rng.random(T)
    gs = GroupSystem([("low", lambda v: v < 0.3), ("mid", lambda v: 0.3 <= v < 0.7),
                      ("high", lambda v: v >= 0.7)])
    masks = np.array([gs.membership(v) for v in x])
    tr = MVP(gs, seed=2).run(rng.random(T) * x, masks)
    rep = build_report(tr, gs, GRID, 0.1, RATE)
    weighted = sum(g.n * g.coverage for g in rep.groups.values()) / T
    assert weighted == pytest.approx(rep.marginal_coverage, abs=1e-9)


def test_report_csv_shape():
    rep = build_report(_transcript([0.5] * 4, [0.1, 0.2, 0.3, 0.9]), ["all"], GRID, 0.1, RATE)
    lines = rep.to_csv(["hello"]).splitlines()
    assert lines[0] == "# hello"
    assert lines[1].startswith("level,group,bucket,n")
    assert [ln.split(",")[0] for ln in lines[2:]] == ["cell", "group", "marginal"]
    assert "coverage" in rep.table()


def test_threshold_stability_examples():
    assert threshold_stability(np.full(10, 0.3)).mean_step == 0.0
    st_alt = threshold_stability(np.array([0.0, 1.0] * 5))
    assert st_alt.mean_step == 1.0
    assert st_alt.top_mass == 0.5
    assert st_alt.histogram.sum() == 10
    with pytest.raises(DomainError):
        threshold_stability(np.array([0.5]))


def test_centered_width():
    assert centered_width(0.25) == 0.5


def _rep(cov):
    tr = _transcript([0.5] * 100, [0.1] * int(cov * 100) + [0.9] * (100 - int(cov * 100)))
    return build_report(tr, ["all"], GRID, 0.1, RATE)


def test_aggregate_examples():
    single = aggregate_trials([_rep(0.9)])["marginal_coverage"]
    assert single.median == single.q25 == single.q75 == 0.9
    agg = aggregate_trials([_rep(0.88), _rep(0.90), _rep(0.92)])["marginal_coverage"]
    assert agg.median == pytest.approx(0.90)
    assert agg.q25 <= agg.median <= agg.q75
    with pytest.raises(DomainError):
        aggregate_trials([])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.one_of(st.floats(-1e6, 1e6), st.just(math.inf)), min_size=1,
                max_size=30))
def test_quantile_matches_numpy_and_orders(values):
    lo, mid, hi = (quantile(values, p) for p in (0.25, 0.5, 0.75))
    assert lo <= mid <= hi
    if all(math.isfinite(v) for v in values):
        assert mid == pytest.approx(float(np.quantile(values, 0.5)), rel=1e-9, abs=1e-9)
    if sum(math.isinf(v) for v in values) * 2 > len(values):
        assert mid == math.inf


def test_report_csv_round_trips_through_report_command(tmp_path):
    tr = MVP(1, seed=0).run(np.linspace(0, 1, 50))
    path = tmp_path / "t.csv"
    path.write_text(tr.to_csv(["groups: all"]))
    back, comments = Transcript.read_csv(io.StringIO(path.read_text()))
    assert build_report(back, ["all"], GRID, 0.1, RATE).marginal_coverage == \
        build_report(tr, ["all"], GRID, 0.1, RATE).marginal_coverage
