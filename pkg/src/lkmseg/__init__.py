"""Large-kernel selective state-space segmentation at desk scale."""

from .estimator import LargeKernelMambaSegmenter
from .model import ModelConfig, build_model, load_checkpoint, predict_mask, \
    save_checkpoint

__all__ = [
    "LargeKernelMambaSegmenter",
    "ModelConfig",
    "build_model",
    "load_checkpoint",
    "predict_mask",
    "save_checkpoint",
]

__version__ = "0.1.0"
