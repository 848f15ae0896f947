from .config import METHODS, PRESETS, ExperimentConfig, ExperimentError, load_config
from .experiment import RunRecord, build_data, evaluate, pretrain, run_experiment, run_method, spurious_mass

__all__ = [
    "METHODS",
    "PRESETS",
    "ExperimentConfig",
    "ExperimentError",
    "RunRecord",
    "build_data",
    "evaluate",
    "load_config",
    "pretrain",
    "run_experiment",
    "run_method",
    "spurious_mass",
]
