"""Binned self-supervised transformer for multichannel sensor sequences."""

__version__ = "0.1.0"

from .model import ModelConfig, count_parameters, load_checkpoint, save_checkpoint
from .preprocess import Scaler, SensorFrame

__all__ = [
    "ModelConfig",
    "Scaler",
    "SensorFrame",
    "count_parameters",
    "load_checkpoint",
    "save_checkpoint",
]
