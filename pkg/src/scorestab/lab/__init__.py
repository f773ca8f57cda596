"""Experiment configuration, pipeline runner and report summaries."""
from .config import ExperimentConfig
from .report import emit_summary
from .runner import run_experiment, write_outputs

__all__ = ["ExperimentConfig", "run_experiment", "write_outputs", "emit_summary"]
