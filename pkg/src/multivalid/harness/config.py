"""Experiment configuration and its flat ``key = value`` file format.

Grammar: one ``key = value`` pair per line; blank lines and lines starting
with ``#`` are ignored. Lists are comma-separated, booleans are
``true``/``false`` and an unset optional value is ``none``.
"""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields, replace

from multivalid.core import ConfigurationError
from multivalid.harness.generators import DEFAULT_BETA, DEFAULT_GROUP_SIGMA2, SORTED_T
from multivalid.mvp import VARIANTS

OUT_DIR_ENV = "MULTIVALID_OUT_DIR"

METHODS = ("mvp", "split", "weighted_split", "group_conservative", "aci")

# per kind: T, trials, methods, rescale
KIND_DEFAULTS = {
    "iid_marginal": (2000, 50, ("mvp", "split"), False),
    "group_noise": (20000, 10, ("mvp", "split", "group_conservative"), True),
    "covariate_shift": (1503, 50, ("mvp", "weighted_split", "split"), True),
    "time_series": (SORTED_T, 20, ("mvp", "aci"), True),
    "mod_groups": (SORTED_T, 20, ("mvp", "aci"), True),
    "sorted_adversarial": (SORTED_T, 1, ("mvp", "aci"), False),
    "csv": (None, 1, None, True),
}
KINDS = tuple(KIND_DEFAULTS)

# methods each kind knows how to run
KIND_METHODS = {
    "iid_marginal": {"mvp", "split", "group_conservative", "aci"},
    "group_noise": {"mvp", "split", "group_conservative", "aci"},
    "covariate_shift": {"mvp", "weighted_split", "split"},
    "time_series": {"mvp", "split", "group_conservative", "aci"},
    "mod_groups": {"mvp", "split", "group_conservative", "aci"},
    "sorted_adversarial": {"mvp", "aci"},
    "csv": set(METHODS) - {"weighted_split"},
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to replay an experiment.

    ``None`` for ``T``, ``trials``, ``methods`` or ``rescale`` means the
    default for the experiment kind (see :meth:`resolve`).
    ``smooth_noise`` is the width of the uniform noise added to every score;
    0 turns smoothing off.
    """

    experiment: str = "iid_marginal"
    T: int | None = None
    trials: int | None = None
    delta: float = 0.1
    m: int = 40
    r: int = 100
    epsilon: float = 1.0
    eta: float | None = None
    variant: str = "normalized"
    methods: tuple[str, ...] | None = None
    gamma: float = 0.005
    lookback: int = 100
    offset: int = 10
    sigma_x2: float = 0.1
    sigma_y2: float = 0.2
    sigma2: float = 0.2
    group_sigma2: tuple[float, ...] = DEFAULT_GROUP_SIGMA2
    beta: tuple[float, ...] = DEFAULT_BETA
    max_score: float = 0.5
    group_count: int = 20
    rescale: bool | None = None
    smooth_noise: float = 0.0
    seed: int = 0
    out_dir: str | None = None
    write_transcripts: bool = True
    workers: int = 1
    data: str | None = None
    schema: str = "scores"
    group_columns: tuple[str, ...] = ()

    def resolve(self) -> "ExperimentConfig":
        """Fill kind defaults and validate; raises ``ConfigurationError``."""
        if self.experiment not in KIND_DEFAULTS:
            raise ConfigurationError(f"unknown experiment {self.experiment!r}; choose from {KINDS}")
        T, trials, methods, rescale = KIND_DEFAULTS[self.experiment]
        if self.experiment == "csv" and methods is None:
            methods = ("mvp", "aci") if self.schema == "scores" else ("mvp", "split")
        cfg = replace(
            self,
            T=self.T if self.T is not None else T,
            trials=self.trials if self.trials is not None else trials,
            methods=tuple(self.methods) if self.methods is not None else methods,
            rescale=self.rescale if self.rescale is not None else rescale,
            out_dir=self.out_dir if self.out_dir is not None else os.environ.get(
                OUT_DIR_ENV, "results"),
        )
        cfg.validate()
        return cfg

    def validate(self):
        def need(cond, msg):
            if not cond:
                raise ConfigurationError(msg)

        need(self.experiment in KIND_DEFAULTS, f"unknown experiment {self.experiment!r}")
        need(self.trials is None or self.trials >= 1, "trials must be at least 1")
        if self.experiment == "csv":
            need(self.data is not None, "the csv experiment needs a data file")
            need(self.schema in ("scores", "regression"), "schema must be scores or regression")
        else:
            need(self.T is None or self.T >= 1, "T must be at least 1")
        if self.experiment == "sorted_adversarial":
            need(self.T is None or self.T >= 2, "the sorted experiment needs T >= 2")
        need(0.0 < self.delta < 1.0, "delta must lie in (0, 1)")
        need(self.m >= 2, "m must be at least 2")
        need(self.r >= 1, "r must be at least 1")
        need(self.epsilon > 0, "epsilon must be positive")
        need(self.eta is None or self.eta > 0, "eta must be positive")
        need(self.variant in VARIANTS, f"variant must be one of {VARIANTS}")
        need(self.gamma >= 0, "gamma cannot be negative")
        need(self.lookback >= 1, "lookback must be at least 1")
        need(self.offset >= 0, "offset cannot be negative")
        need(self.sigma_x2 >= 0 and self.sigma_y2 >= 0 and self.sigma2 >= 0,
             "variances cannot be negative")
        need(all(s >= 0 for s in self.group_sigma2), "variances cannot be negative")
        need(len(self.group_sigma2) >= 1, "need at least one group variance")
        need(0 < self.max_score <= 1, "max_score must lie in (0, 1]")
        need(self.group_count >= 1, "group_count must be at least 1")
        need(self.smooth_noise >= 0, "smooth_noise cannot be negative")
        need(self.workers >= 1, "workers must be at least 1")
        if self.methods is not None:
            need(len(self.methods) >= 1, "no methods selected")
            bad = [x for x in self.methods if x not in METHODS]
            need(not bad, f"unknown methods {bad}; choose from {METHODS}")
            allowed = KIND_METHODS[self.experiment]
            bad = [x for x in self.methods if x not in allowed]
            need(not bad, f"{self.experiment} cannot run {bad}")
            need(len(set(self.methods)) == len(self.methods), "duplicate methods")

    # -- serialization ---------------------------------------------------

    def items(self) -> list[tuple[str, str]]:
        return [(f.name, _format(getattr(self, f.name))) for f in fields(self)]

    def dumps(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.items())

    def comment(self) -> str:
        """One-line ``key=value; ...`` rendering for CSV comment headers."""
        return "config: " + "; ".join(f"{k}={v}" for k, v in self.items()
                                      if k not in ("out_dir", "workers"))

    @classmethod
    def loads(cls, text: str, source: str = "<config>") -> "ExperimentConfig":
        return cls(**parse_pairs(text, source))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                text = fh.read()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.loads(text, str(path))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.dumps())


_HINTS = typing.get_type_hints(ExperimentConfig)


def _format(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_format(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _base_types(hint) -> tuple[type, bool, bool]:
    """(scalar type, optional?, tuple?) for a field annotation."""
    args = typing.get_args(hint)
    optional = type(None) in args
    if optional:
        hint = next(a for a in args if a is not type(None))
    if typing.get_origin(hint) is tuple:
        return typing.get_args(hint)[0], optional, True
    return hint, optional, False


def _scalar(kind: type, text: str, key: str):
    try:
        if kind is bool:
            if text.lower() not in ("true", "false"):
                raise ValueError(text)
            return text.lower() == "true"
        return kind(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot read {text!r} as {kind.__name__}") from None


def parse_value(key: str, text: str):
    if key not in _HINTS:
        raise ConfigurationError(f"unknown config key {key!r}")
    kind, optional, is_tuple = _base_types(_HINTS[key])
    text = text.strip()
    if optional and text.lower() == "none":
        return None
    if is_tuple:
        parts = [p.strip() for p in text.split(",") if p.strip()]
        return tuple(_scalar(kind, p, key) for p in parts)
    return _scalar(kind, text, key)


def parse_pairs(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            out[key] = parse_value(key, value)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{source}:{lineno}: {exc}") from None
    return out


def field_names() -> list[str]:
    return [f.name for f in dataclasses.fields(ExperimentConfig)]
