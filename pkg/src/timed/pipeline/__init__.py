"""Training orchestration, persistence and the command line."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import RunConfig, builtin_config, load_config
from .runs import ABLATION_VARIANTS, evaluate_samples, run_variant
from .training import Trainer, TrainingError, build_dataset, generate

__all__ = [
    "ABLATION_VARIANTS",
    "CheckpointError",
    "RunConfig",
    "Trainer",
    "TrainingError",
    "build_dataset",
    "builtin_config",
    "evaluate_samples",
    "generate",
    "load_checkpoint",
    "load_config",
    "run_variant",
    "save_checkpoint",
]
