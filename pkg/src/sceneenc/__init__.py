"""Point cloud semantic segmentation with a scene-level descriptor and a
region similarity loss, built on a small float64 autodiff engine."""

__version__ = "0.1.0"

from .backbone import ModelConfig, forward_full, init_params
from .data import BenchmarkConfig, ConfigError, Dataset, build_benchmark, load_dataset, save_dataset
from .geometry import PointCloud, knn, knn_same_label
from .kernels import BACKEND
from .trainer import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__all__ = [
    "BACKEND", "BenchmarkConfig", "Checkpoint", "ConfigError", "Dataset", "ModelConfig", "PointCloud",
    "TrainConfig", "build_benchmark", "evaluate", "forward_full", "init_params", "knn", "knn_same_label",
    "load_checkpoint", "load_dataset", "save_checkpoint", "save_dataset", "train",
]
