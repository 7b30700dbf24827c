"""Command line entry point: ``multivalid run | report | gen``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from multivalid.core import BucketGrid, ConfigurationError, DomainError, RateFunction
from multivalid.harness import generators as gen
from multivalid.harness.config import KINDS, METHODS, OUT_DIR_ENV, ExperimentConfig
from multivalid.harness.experiments import run_experiment, summary_text
from multivalid.harness.io import export_csv
from multivalid.metrics import build_report, centered_width, threshold_stability
from multivalid.mvp import VARIANTS, Transcript
from multivalid.scores import interval_width

log = logging.getLogger("multivalid")

# CLI flag -> config field, for flags that override config-file values
OVERRIDES = {
    "experiment": "experiment", "T": "T", "trials": "trials", "delta": "delta", "m": "m",
    "r": "r", "epsilon": "epsilon", "eta": "eta", "variant": "variant", "methods": "methods",
    "gamma": "gamma", "lookback": "lookback", "offset": "offset", "seed": "seed",
    "out_dir": "out_dir", "rescale": "rescale", "smooth_noise": "smooth_noise",
    "workers": "workers", "data": "data", "schema": "schema", "group_columns": "group_columns",
    "no_transcripts": None,
}


def _csv_list(text: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in text.split(",") if p.strip())


def _add_algorithm_flags(p: argparse.ArgumentParser):
    g = p.add_argument_group("algorithm")
    g.add_argument("--delta", type=float, help="target miscoverage (default 0.1)")
    g.add_argument("--m", type=int, help="number of buckets (default 40)")
    g.add_argument("--r", type=int, help="grid refinement (default 100)")
    g.add_argument("--epsilon", type=float, help="rate-function exponent (default 1)")
    g.add_argument("--eta", type=float, help="learning rate override")
    g.add_argument("--variant", choices=VARIANTS, help="bucket signal variant")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multivalid", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write CSV results")
    run.add_argument("--config", type=Path, help="flat key = value config file")
    run.add_argument("--experiment", choices=KINDS)
    _add_algorithm_flags(run)
    run.add_argument("--methods", type=_csv_list,
                     help=f"comma-separated subset of {','.join(METHODS)}")
    run.add_argument("--trials", type=int)
    run.add_argument("--T", type=int, help="rounds per trial (base set size for covariate_shift)")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--out-dir", dest="out_dir",
                     help=f"output directory (default ${OUT_DIR_ENV} or ./results)")
    run.add_argument("--rescale", action=argparse.BooleanOptionalAction, default=None,
                     help="map raw scores by s/(1+s) instead of clamping at 1")
    run.add_argument("--smooth-noise", dest="smooth_noise", type=float,
                     help="width of uniform noise added to every score (0 = off)")
    aci = run.add_argument_group("ACI")
    aci.add_argument("--gamma", type=float)
    aci.add_argument("--lookback", type=int)
    aci.add_argument("--offset", type=int, help="burn-in rounds excluded from metrics")
    run.add_argument("--data", help="CSV file for --experiment csv")
    run.add_argument("--schema", choices=("scores", "regression"))
    run.add_argument("--group-columns", dest="group_columns", type=_csv_list,
                     help="feature columns whose values define groups (csv experiment)")
    run.add_argument("--workers", type=int, help="parallel trial processes")
    run.add_argument("--no-transcripts", action="store_true",
                     help="skip the per-round transcript CSVs")

    rep = sub.add_parser("report", help="rebuild metrics from a transcript CSV")
    rep.add_argument("transcript", type=Path)
    rep.add_argument("--delta", type=float, default=0.1)
    rep.add_argument("--m", type=int, default=40)
    rep.add_argument("--r", type=int, default=100)
    rep.add_argument("--epsilon", type=float, default=1.0)
    rep.add_argument("--groups", type=_csv_list,
                     help="group names (default: read from the file's comment header)")
    rep.add_argument("--rescale", action=argparse.BooleanOptionalAction, default=False,
                     help="thresholds are on the s/(1+s) scale")
    rep.add_argument("--out", type=Path, help="write the report CSV here")

    g = sub.add_parser("gen", help="write a synthetic dataset as CSV")
    g.add_argument("kind", choices=("iid_linear", "group_noise", "sorted", "volatility",
                                    "mod_groups", "shift_base"))
    g.add_argument("--T", type=int, default=2000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sigma-x2", dest="sigma_x2", type=float, default=0.1)
    g.add_argument("--sigma-y2", dest="sigma_y2", type=float, default=0.2)
    g.add_argument("--max-score", dest="max_score", type=float, default=0.5)
    g.add_argument("--group-count", dest="group_count", type=int, default=20)
    g.add_argument("-o", "--out", type=Path, required=True)
    return parser


def config_from_args(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {}
    for flag, name in OVERRIDES.items():
        value = getattr(args, flag, None)
        if name is not None and value is not None:
            changes[name] = value
    if getattr(args, "no_transcripts", False):
        changes["write_transcripts"] = False
    return replace(cfg, **changes)


def cmd_run(args) -> int:
    cfg = config_from_args(args).resolve()
    result = run_experiment(cfg)
    print(summary_text(result))
    print(f"\nwrote {result.out_path}")
    return 0


def _groups_from_comments(comments: list[str]) -> list[str] | None:
    for line in comments:
        if line.startswith("groups:"):
            return _csv_list(line.split(":", 1)[1])
    return None


def cmd_report(args) -> int:
    try:
        with open(args.transcript) as fh:
            transcript, comments = Transcript.read_csv(fh)
    except OSError as exc:
        raise DomainError(f"cannot read {args.transcript}: {exc}") from exc
    names = args.groups or _groups_from_comments(comments) or ["all"]
    width = (lambda q: interval_width(q, rescaled=True)) if args.rescale else centered_width
    grid = BucketGrid(args.m, args.r)
    report = build_report(transcript, names, grid, args.delta, RateFunction(args.epsilon),
                          width_fn=width)
    print(report.table())
    print(f"\nmultivalidity error {report.multivalidity_error:.4f}")
    if len(transcript) >= 2:
        stab = threshold_stability(transcript, grid)
        print(f"mean |q_t - q_t-1| {stab.mean_step:.4f}; share at q = 1 {stab.top_mass:.4f}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            report.write_csv(fh, comments)
        print(f"wrote {args.out}")
    return 0


def cmd_gen(args) -> int:
    if args.kind == "iid_linear":
        stream = gen.gen_iid_linear(args.T, args.sigma_x2, args.sigma_y2, seed=args.seed)
    elif args.kind == "group_noise":
        stream, _ = gen.gen_group_noise(args.T, seed=args.seed, sigma_x2=args.sigma_x2)
    elif args.kind == "sorted":
        stream = gen.gen_sorted_scores(args.T, args.max_score)
    elif args.kind == "volatility":
        stream = gen.gen_volatility_scores(args.T, seed=args.seed)
    elif args.kind == "mod_groups":
        stream = gen.gen_volatility_scores(args.T, seed=args.seed, group_count=args.group_count)
    else:
        stream = gen.gen_shift_base(args.T, sigma_y2=args.sigma_y2, seed=args.seed)
    params = "; ".join(f"{k}={v}" for k, v in sorted(vars(args).items())
                       if k not in ("out", "command", "verbose"))
    export_csv(stream, args.out, comments=[f"gen: {params}"])
    print(f"wrote {len(stream)} rows to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "report": cmd_report, "gen": cmd_gen}
    try:
        return handlers[args.command](args)
    except (ConfigurationError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
