"""Data generators, configuration, CSV input/output and experiment runners."""

from multivalid.harness.config import ExperimentConfig
from multivalid.harness.experiments import RunResult, run_experiment, run_trial
from multivalid.harness.io import export_csv, ingest_csv

__all__ = ["ExperimentConfig", "RunResult", "export_csv", "ingest_csv", "run_experiment",
           "run_trial"]
