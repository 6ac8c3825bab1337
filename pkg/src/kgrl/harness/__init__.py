"""Config-driven experiments and the ``kgrl`` command line."""

from kgrl.harness.config import ConfigError, ExperimentConfig, load_config
from kgrl.harness.record import RecordError, read_record, validate_record
from kgrl.harness.runner import eval_run, load_run, run_experiment, sweep, trace, train_seed, transfer

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "RecordError",
    "eval_run",
    "load_config",
    "load_run",
    "read_record",
    "run_experiment",
    "sweep",
    "trace",
    "train_seed",
    "transfer",
    "validate_record",
]
