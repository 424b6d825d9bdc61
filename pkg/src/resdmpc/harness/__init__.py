from .attacks import AttackStream, inject_attack
from .config import AttackSpec, ExperimentConfig, config_from_dict, config_to_dict, load_config
from .metrics import GridStep, GridSummary, StepRecord, summarize
from .runner import ExperimentResult, run_experiment

__all__ = [
    "AttackSpec", "AttackStream", "ExperimentConfig", "ExperimentResult", "GridStep", "GridSummary",
    "StepRecord", "config_from_dict", "config_to_dict", "inject_attack", "load_config",
    "run_experiment", "summarize",
]
