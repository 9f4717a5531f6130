"""Scenario definitions, experiment suites, reporting and the command-line entry point."""

from .config import ConfigError, ExperimentConfig, load_config
from .report import ExperimentResult, emit_report
from .scene import SceneSpec, default_scene
from .suites import run_consequence_suite, run_propagation_suite, run_structure_suite

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "ExperimentResult",
    "SceneSpec",
    "default_scene",
    "emit_report",
    "load_config",
    "run_consequence_suite",
    "run_propagation_suite",
    "run_structure_suite",
]
