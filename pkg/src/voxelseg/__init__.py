"""Patch-based convolutional networks for voxel segmentation of 3D volumes."""

from .estimator import DivergenceError, PatchCNNClassifier
from .nn import NetworkSpec, load_model, save_model
from .phantom import Dataset, PhantomConfig, make_dataset
from .presets import build_architecture
from .sampler import Full3D, PatchFormat, Stacked2D, TriPlanar
from .stopping import EarlyStopping
from .trainer import RunReport, TrainConfig, evaluate_run, label_image, train
from .volume import postprocess, segmentation_metrics

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DivergenceError", "EarlyStopping", "Full3D", "NetworkSpec",
    "PatchCNNClassifier", "PatchFormat", "PhantomConfig", "RunReport", "Stacked2D",
    "TrainConfig", "TriPlanar", "build_architecture", "evaluate_run", "label_image",
    "load_model", "make_dataset", "postprocess", "save_model", "segmentation_metrics",
    "train",
]
