"""Online multivalid conformal prediction with baseline methods and a benchmark harness."""

from multivalid.baselines import (
    ACI,
    SplitCalibrator,
    group_conservative_threshold,
    split_threshold,
    weighted_split_threshold,
)
from multivalid.core import (
    BucketGrid,
    ConfigurationError,
    DomainError,
    GroupSystem,
    RateFunction,
    bucket_index,
    compute_eta,
    compute_K_epsilon,
)
from multivalid.metrics import CoverageReport, build_report, threshold_stability
from multivalid.mvp import MVP, RoundRecord, Transcript
from multivalid.scores import OnlineLeastSquares, invert_to_interval, rescale_unbounded

__all__ = [
    "ACI", "BucketGrid", "ConfigurationError", "CoverageReport", "DomainError", "GroupSystem",
    "MVP", "OnlineLeastSquares", "RateFunction", "RoundRecord", "SplitCalibrator", "Transcript",
    "bucket_index", "build_report", "compute_K_epsilon", "compute_eta",
    "group_conservative_threshold", "invert_to_interval", "rescale_unbounded",
    "split_threshold", "threshold_stability", "weighted_split_threshold",
]
__version__ = "0.1.0"
