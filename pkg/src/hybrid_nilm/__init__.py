"""Hybrid CNN-LSTM sequence-to-sequence energy disaggregation in plain numpy."""

from .data import NormStats, TimeSeries, WindowedDataset
from .evaluation import ApplianceMetrics, ConfusionCounts, MetricsReport
from .model import Model, ModelConfig, build_model, load_model, param_count, save_model
from .training import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ApplianceMetrics", "ConfusionCounts", "MetricsReport", "Model", "ModelConfig",
    "NormStats", "TimeSeries", "TrainConfig", "WindowedDataset", "build_model",
    "load_model", "param_count", "save_model", "train",
]
