"""Core module - Data models and algorithms."""

from .models import RunConfig, SgldConfig, TrainConfig, TaskDataset, TaskStream
from .tensor_diff import MlpArchitecture, ParamVector
from .posterior import GaussianPosterior
from .trainer import ContinualTrainer

__all__ = [
    "RunConfig",
    "SgldConfig",
    "TrainConfig",
    "TaskDataset",
    "TaskStream",
    "MlpArchitecture",
    "ParamVector",
    "GaussianPosterior",
    "ContinualTrainer",
]
