"""Experiment runners: build a trial's data, play every method on it, write CSVs.

Seeding: trial ``k`` draws from ``SeedSequence(seed, spawn_key=(k, j))``
where ``j`` is :data:`DATA_STREAM` for the data, :data:`NOISE_STREAM` for
score smoothing and :data:`MVP_STREAM` for MVP's tie-breaking draws. A
trial's output therefore depends only on the master seed and its index.
"""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from multivalid.baselines import (
    ACI,
    group_conservative_threshold,
    split_threshold,
    weighted_split_threshold,
)
from multivalid.core import BucketGrid, ConfigurationError, DomainError, RateFunction, bucket_index
from multivalid.core import mask_to_int
from multivalid.harness import generators as gen
from multivalid.harness.config import ExperimentConfig
from multivalid.harness.io import column_groups, ingest_csv
from multivalid.metrics import CoverageReport, Spread, aggregate_trials, build_report, format_table
from multivalid.mvp import MVP, RoundRecord, Transcript
from multivalid.scores import OnlineLeastSquares, interval_width, rescale_unbounded

log = logging.getLogger(__name__)

DATA_STREAM, NOISE_STREAM, MVP_STREAM = 0, 1, 2
SPLIT_FAMILY = ("split", "group_conservative")


def trial_rng(seed: int, trial: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(trial, stream)))


@dataclass
class MethodRun:
    transcript: Transcript
    report: CoverageReport
    clamps: int = 0
    saturations: int = 0
    warm_rounds: int = 0


@dataclass
class RunResult:
    config: ExperimentConfig
    group_names: list[str]
    trials: list[dict[str, MethodRun]]
    summary: dict[str, dict[str, Spread]] = field(default_factory=dict)
    out_path: Path | None = None

    def reports(self, method: str) -> list[CoverageReport]:
        return [t[method].report for t in self.trials]

    def metric(self, method: str, key: str) -> np.ndarray:
        return np.array([t[method].report.metrics()[key] for t in self.trials])


class ScoreMap:
    """Maps raw nonnegative scores into [0, 1].

    With ``rescale`` the map is ``s / (1 + s)``; otherwise scores are
    clamped at 1. Optional smoothing noise is indexed by data position so a
    point keeps the same perturbation however often its score is recomputed.
    """

    def __init__(self, rescale: bool, noise: np.ndarray | None = None):
        self.rescale = rescale
        self.noise = noise

    def __call__(self, raw, idx):
        raw = np.asarray(raw, dtype=float)
        s = rescale_unbounded(raw) if self.rescale else np.minimum(raw, 1.0)
        if self.noise is not None:
            s = np.minimum(s + self.noise[idx], 1.0)
        return s

    def clamped(self, raw) -> bool:
        return not self.rescale and raw > 1.0

    def width(self, q):
        return interval_width(q, rescaled=self.rescale)


class Recorder:
    """Accumulates one method's rounds into a transcript."""

    def __init__(self, grid: BucketGrid):
        self.grid = grid
        self.transcript = Transcript()
        self.clamps = 0

    def add(self, t: int, mask, q: float, score: float):
        q = min(max(float(q), 0.0), 1.0)
        self.transcript.append(RoundRecord(t, mask_to_int(mask), q, bucket_index(q, self.grid),
                                           float(score), bool(score <= q)))


def _make_mvp(cfg: ExperimentConfig, group_count: int, trial: int, rate: RateFunction) -> MVP:
    return MVP(group_count, delta=cfg.delta, m=cfg.m, r=cfg.r, eta=cfg.eta, variant=cfg.variant,
               seed=trial_rng(cfg.seed, trial, MVP_STREAM), rate=rate)


def _score_map(cfg: ExperimentConfig, trial: int, n: int) -> ScoreMap:
    noise = None
    if cfg.smooth_noise > 0:
        noise = cfg.smooth_noise * trial_rng(cfg.seed, trial, NOISE_STREAM).random(n)
    return ScoreMap(cfg.rescale, noise)


def _split_q(cal: np.ndarray, member_cal: np.ndarray | None, mask: np.ndarray, delta: float,
             conservative: bool) -> float:
    """Split or group-conservative threshold; ``member_cal`` is (groups, n)."""
    if cal.size == 0:
        return math.inf
    marginal = split_threshold(cal, delta)
    if not conservative:
        return marginal
    per_group = {}
    active = []
    for j in np.flatnonzero(mask):
        sel = cal[member_cal[j]]
        if sel.size:
            per_group[j] = split_threshold(sel, delta)
            active.append(j)
        # groups with no calibration points contribute the trivial threshold
        else:
            per_group[j] = math.inf
            active.append(j)
    return group_conservative_threshold(per_group, active, marginal)


def _run_regression(cfg, trial, X, y, member, smap) -> dict[str, Recorder | MVP]:
    """Online regression: MVP and ACI score with a model fit on every past
    point; split methods fit on even rounds and calibrate on odd rounds."""
    grid = BucketGrid(cfg.m, cfg.r)
    T, d = X.shape
    methods = cfg.methods
    rate = RateFunction(cfg.epsilon)
    rec = {name: Recorder(grid) for name in methods}
    mvp = _make_mvp(cfg, member.shape[1], trial, rate) if "mvp" in methods else None
    aci = ACI(cfg.delta, cfg.gamma, cfg.lookback, cfg.offset) if "aci" in methods else None
    full = OnlineLeastSquares(d) if (mvp or aci) else None
    split_on = any(name in methods for name in SPLIT_FAMILY)
    train = OnlineLeastSquares(d) if split_on else None
    # calibration points live in preallocated arrays; their scores are
    # recomputed only after the training model changes
    n_cal_max = (T + 1) // 2
    Xc = np.empty((n_cal_max, d)) if split_on else None
    yc = np.empty(n_cal_max)
    cidx = np.empty(n_cal_max, dtype=int)
    Mc = np.empty((member.shape[1], n_cal_max), dtype=bool)
    nc = 0
    cal = np.empty(0)
    stale = False
    for i in range(T):
        t = i + 1
        x, mask = X[i], member[i]
        if full is not None:
            raw = abs(float(x @ full.weights) - y[i])
            s = float(smap(raw, i))
            if mvp is not None:
                r = mvp.update(mask, mvp.predict(mask), s)
                rec["mvp"].transcript.append(r)
                rec["mvp"].clamps += smap.clamped(raw)
            if aci is not None:
                burning = aci.burning_in
                q = aci.predict()
                aci.update(q, s)
                if not burning:
                    rec["aci"].add(t, mask, q, s)
                    rec["aci"].clamps += smap.clamped(raw)
            full.update(x, y[i])
        if split_on:
            w = train.weights
            if stale:
                cal = smap(np.abs(Xc[:nc] @ w - yc[:nc]), cidx[:nc])
                stale = False
            raw = abs(float(x @ w) - y[i])
            s = float(smap(raw, i))
            member_cal = Mc[:, :nc]
            for name in SPLIT_FAMILY:
                if name in methods:
                    q = _split_q(cal, member_cal, mask, cfg.delta, name == "group_conservative")
                    rec[name].add(t, mask, q, s)
                    rec[name].clamps += smap.clamped(raw)
            if t % 2 == 1:
                Xc[nc], yc[nc], cidx[nc], Mc[:, nc] = x, y[i], i, mask
                nc += 1
                cal = np.append(cal, s)
            else:
                train.update(x, y[i])
                stale = True
    return rec, mvp


def _run_scores(cfg, trial, raw_scores, member, smap):
    """A precomputed score stream. Split methods calibrate on odd rounds."""
    grid = BucketGrid(cfg.m, cfg.r)
    methods = cfg.methods
    rate = RateFunction(cfg.epsilon)
    rec = {name: Recorder(grid) for name in methods}
    mvp = _make_mvp(cfg, member.shape[1], trial, rate) if "mvp" in methods else None
    aci = ACI(cfg.delta, cfg.gamma, cfg.lookback, cfg.offset) if "aci" in methods else None
    s_all = smap(np.asarray(raw_scores, dtype=float), np.arange(len(raw_scores)))
    for i, s in enumerate(s_all):
        t, mask, s = i + 1, member[i], float(s)
        clamp = smap.clamped(raw_scores[i])
        if mvp is not None:
            rec["mvp"].transcript.append(mvp.update(mask, mvp.predict(mask), s))
            rec["mvp"].clamps += clamp
        if aci is not None:
            burning = aci.burning_in
            q = aci.predict()
            aci.update(q, s)
            if not burning:
                rec["aci"].add(t, mask, q, s)
                rec["aci"].clamps += clamp
        odd = np.arange(0, i, 2)
        for name in SPLIT_FAMILY:
            if name in methods:
                q = _split_q(s_all[odd], member[odd].T, mask, cfg.delta,
                             name == "group_conservative")
                rec[name].add(t, mask, q, s)
                rec[name].clamps += clamp
    return rec, mvp


def _ridge(X, y, ridge=1e-6):
    return np.linalg.solve(X.T @ X + ridge * np.eye(X.shape[1]), X.T @ y)


def _run_covariate_shift(cfg, trial, rng):
    """Fit on a training fold, calibrate on a second fold and evaluate on a
    shifted resample of the rest. MVP is warm-started on a shifted resample
    of the calibration fold; those rounds are not scored."""
    if cfg.T < 8:
        raise ConfigurationError("covariate shift needs at least 8 base points")
    grid = BucketGrid(cfg.m, cfg.r)
    rate = RateFunction(cfg.epsilon)
    base = gen.gen_shift_base(cfg.T, d=len(cfg.beta), sigma_y2=cfg.sigma_y2, seed=rng)
    N = len(base)
    perm = rng.permutation(N)
    n_tr = n_cal = N // 4
    tr, cal, pool = perm[:n_tr], perm[n_tr:n_tr + n_cal], perm[n_tr + n_cal:]
    w_pool = gen.shift_weights(base.features[pool], cfg.beta)
    ev = pool[gen.rejection_resample(w_pool, len(pool) // 2, rng)]
    warm = cal[gen.rejection_resample(gen.shift_weights(base.features[cal], cfg.beta),
                                      n_cal, rng)]
    theta = _ridge(base.features[tr], base.labels[tr])
    raw = np.abs(base.features @ theta - base.labels)
    smap = _score_map(cfg, trial, N)
    scores = smap(raw, np.arange(N))
    mask = np.ones(1, dtype=bool)
    rec = {name: Recorder(grid) for name in cfg.methods}
    mvp = None
    if "mvp" in cfg.methods:
        mvp = _make_mvp(cfg, 1, trial, rate)
        for j in warm:
            mvp.update(mask, mvp.predict(mask), float(scores[j]))
    cal_s, cal_w = scores[cal], gen.shift_weights(base.features[cal], cfg.beta)
    split_q = split_threshold(cal_s, cfg.delta)
    for k, j in enumerate(ev):
        t, s = k + 1, float(scores[j])
        clamp = smap.clamped(raw[j])
        if mvp is not None:
            rec["mvp"].transcript.append(mvp.update(mask, mvp.predict(mask), s))
            rec["mvp"].clamps += clamp
        if "weighted_split" in rec:
            w_t = float(gen.shift_weights(base.features[j], cfg.beta))
            rec["weighted_split"].add(t, mask, weighted_split_threshold(cal_s, cal_w, cfg.delta,
                                                                        w_t), s)
            rec["weighted_split"].clamps += clamp
        if "split" in rec:
            rec["split"].add(t, mask, split_q, s)
            rec["split"].clamps += clamp
    return rec, mvp, len(warm), smap


def _trial_data(cfg: ExperimentConfig, trial: int):
    """(kind, payload, membership matrix, group names) for one trial."""
    rng = trial_rng(cfg.seed, trial, DATA_STREAM)
    kind = cfg.experiment
    if kind == "iid_marginal":
        s = gen.gen_iid_linear(cfg.T, cfg.sigma_x2, cfg.sigma_y2, seed=rng)
        return "regression", s, np.ones((cfg.T, 1), dtype=bool), ["all"]
    if kind == "group_noise":
        s, groups = gen.gen_group_noise(cfg.T, cfg.sigma2, cfg.group_sigma2, seed=rng,
                                        sigma_x2=cfg.sigma_x2)
        return "regression", s, gen.binary_membership(s.features, len(cfg.group_sigma2)), \
            groups.names
    if kind == "sorted_adversarial":
        s = gen.gen_sorted_scores(cfg.T, cfg.max_score)
        return "scores", s, np.ones((cfg.T, 1), dtype=bool), ["all"]
    if kind == "time_series":
        s = gen.gen_volatility_scores(cfg.T, seed=rng)
        return "scores", s, np.ones((cfg.T, 1), dtype=bool), ["all"]
    if kind == "mod_groups":
        s = gen.gen_volatility_scores(cfg.T, seed=rng, group_count=cfg.group_count)
        return "scores", s, gen.mod_membership(cfg.T, cfg.group_count), \
            gen.gen_mod_groups(cfg.group_count).names
    if kind == "csv":
        s = ingest_csv(cfg.data, cfg.schema)
        groups, member = column_groups(s, cfg.group_columns)
        return ("regression" if s.is_regression else "scores"), s, member, groups.names
    raise ConfigurationError(f"unknown experiment {kind!r}")


def run_trial(cfg: ExperimentConfig, trial: int) -> tuple[list[str], dict[str, MethodRun]]:
    """Run every configured method on trial ``trial``'s data."""
    cfg = cfg.resolve()
    grid = BucketGrid(cfg.m, cfg.r)
    rate = RateFunction(cfg.epsilon)
    warm = 0
    if cfg.experiment == "covariate_shift":
        rec, mvp, warm, smap = _run_covariate_shift(cfg, trial,
                                                    trial_rng(cfg.seed, trial, DATA_STREAM))
        names = ["all"]
    else:
        shape, stream, member, names = _trial_data(cfg, trial)
        smap = _score_map(cfg, trial, len(stream))
        if shape == "regression":
            rec, mvp = _run_regression(cfg, trial, stream.features, stream.labels, member, smap)
        else:
            rec, mvp = _run_scores(cfg, trial, stream.scores, member, smap)
    out = {}
    for name in cfg.methods:
        tr = rec[name].transcript
        if len(tr) == 0:
            raise ConfigurationError(f"{name} played no scored rounds; increase T")
        report = build_report(tr, names, grid, cfg.delta, rate, width_fn=smap.width)
        is_mvp = name == "mvp"
        out[name] = MethodRun(tr, report, rec[name].clamps,
                              mvp.diagnostics.saturations if is_mvp else 0,
                              warm if is_mvp else 0)
    return names, out


def _trial_job(args):
    cfg, trial = args
    return run_trial(cfg, trial)


def run_experiment(config: ExperimentConfig, write: bool = True) -> RunResult:
    """Run all trials, then write per-trial CSVs and the cross-trial summary."""
    cfg = config.resolve()
    jobs = [(cfg, k) for k in range(cfg.trials)]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_trial_job, jobs))
    else:
        results = [_trial_job(j) for j in jobs]
    names = results[0][0]
    result = RunResult(cfg, names, [r[1] for r in results])
    result.summary = {name: aggregate_trials(result.reports(name)) for name in cfg.methods}
    if write:
        result.out_path = write_outputs(result)
    return result


def _comments(cfg: ExperimentConfig, names) -> list[str]:
    return [cfg.comment(), "groups: " + ",".join(names)]


def _open(path: Path):
    try:
        return open(path, "w", newline="")
    except OSError as exc:
        raise DomainError(f"cannot write {path}: {exc}") from exc


def write_outputs(result: RunResult) -> Path:
    cfg = result.config
    root = Path(cfg.out_dir) / cfg.experiment
    try:
        root.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DomainError(f"cannot create {root}: {exc}") from exc
    comments = _comments(cfg, result.group_names)
    for k, runs in enumerate(result.trials):
        tdir = root / f"trial_{k:03d}"
        tdir.mkdir(exist_ok=True)
        for name, run in runs.items():
            if cfg.write_transcripts:
                with _open(tdir / f"{name}_transcript.csv") as fh:
                    run.transcript.write_csv(fh, comments)
            with _open(tdir / f"{name}_report.csv") as fh:
                run.report.write_csv(fh, comments)

    keys = list(result.trials[0][cfg.methods[0]].report.metrics())
    with _open(root / "trials.csv") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["trial", "method", "rounds", "clamps", "saturations", "warm_rounds"] + keys)
        for k, runs in enumerate(result.trials):
            for name, run in runs.items():
                m = run.report.metrics()
                w.writerow([k, name, run.report.rounds, run.clamps, run.saturations,
                            run.warm_rounds] + [repr(float(m[key])) for key in keys])

    with _open(root / "summary.csv") as fh:
        for line in comments:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "metric", "median", "q25", "q75", "mean", "std"])
        for name in cfg.methods:
            for key, spread in result.summary[name].items():
                vals = result.metric(name, key)
                vals = vals[~np.isnan(vals)]
                with np.errstate(invalid="ignore"):
                    mean = float(vals.mean()) if vals.size else math.nan
                    std = float(vals.std()) if vals.size else math.nan
                w.writerow([name, key, repr(spread.median), repr(spread.q25), repr(spread.q75),
                            repr(mean), repr(std)])

    with _open(root / "summary.txt") as fh:
        fh.write(summary_text(result) + "\n")
    return root


def summary_text(result: RunResult) -> str:
    cfg = result.config
    head = [f"{cfg.experiment}: {cfg.trials} trial(s), T={cfg.T or cfg.data}, delta={cfg.delta}, "
            f"m={cfg.m}, r={cfg.r}"]
    rows = [("method", "metric", "median", "IQR")]
    for name in cfg.methods:
        for key, sp in result.summary[name].items():
            if "[" in key and not key.startswith("coverage["):
                continue
            rows.append((name, key, f"{sp.median:.4f}", f"[{sp.q25:.4f}, {sp.q75:.4f}]"))
    return "\n".join(head + [format_table(rows)])
