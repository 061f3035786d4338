"""Unsupervised video object segmentation with discriminative features, on a small numpy autodiff core."""

from dfnet.inference import InferConfig, infer_group
from dfnet.model import DFNet, ModelConfig, load_checkpoint, save_checkpoint
from dfnet.trainer import TrainConfig, train_stage

__version__ = "0.1.0"

__all__ = [
    "DFNet",
    "InferConfig",
    "ModelConfig",
    "TrainConfig",
    "infer_group",
    "load_checkpoint",
    "save_checkpoint",
    "train_stage",
]
