"""Discriminator-driven parallel CNNs on a small numpy autodiff engine."""

from .analysis import divergence_report, grad_cam, heatmap_overlap
from .config import RunConfig, load_config
from .model import DpcnModel, build_preset
from .training import Trainer, TrainingSchedule, baseline, evaluate, train

__version__ = "0.1.0"

__all__ = ["DpcnModel", "RunConfig", "Trainer", "TrainingSchedule", "baseline", "build_preset",
           "divergence_report", "evaluate", "grad_cam", "heatmap_overlap", "load_config", "train"]
