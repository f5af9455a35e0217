"""Conditional Glow for label-conditioned next-frame video generation."""

from .autodiff import Tensor, backward, no_grad, precision
from .glow import Glow, GlowConfig
from .training import TrainConfig, Trainer
from .video import VARIANTS, ModelConfig, VideoModel, VideoRecord, generate_video

__all__ = [
    "Tensor", "backward", "no_grad", "precision",
    "Glow", "GlowConfig",
    "ModelConfig", "VideoModel", "VideoRecord", "VARIANTS", "generate_video",
    "TrainConfig", "Trainer",
]
__version__ = "0.1.0"
