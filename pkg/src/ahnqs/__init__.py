"""Recurrent query suggestion: NQS, HNQS and AHNQS, plus the ADJ baseline."""

from .models import ModelConfig, ModelKind, ModelParams, ModelRunner, init_params, suggest
from .training import TrainConfig, train

__all__ = [
    "ModelConfig", "ModelKind", "ModelParams", "ModelRunner", "TrainConfig",
    "init_params", "suggest", "train",
]
__version__ = "0.1.0"
