"""Diffusion actor-critic for offline recommendation on a synthetic user MDP."""

from .diffusion import NoiseModel, Schedule, make_schedule, sample_action
from .env import BehaviorSpec, EnvConfig, generate_dataset
from .data import OfflineDataset, read_dataset, write_dataset
from .trainer import TrainConfig, default_config, load_checkpoint, run_backbone, save_checkpoint

__all__ = [
    "NoiseModel", "Schedule", "make_schedule", "sample_action",
    "BehaviorSpec", "EnvConfig", "generate_dataset",
    "OfflineDataset", "read_dataset", "write_dataset",
    "TrainConfig", "default_config", "load_checkpoint", "run_backbone", "save_checkpoint",
]
