"""Command-line experiments: sampling, couplings, mixing times, bias scans, validation and bounds."""

from .config import ConfigError, ExperimentConfig, parse_config
from .experiments import RunReport, run_experiment

__all__ = ["ConfigError", "ExperimentConfig", "RunReport", "parse_config", "run_experiment"]
