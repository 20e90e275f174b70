"""High-resolution video vasculature segmentation with autoregressive residual
priors, a multi-view encoder, and a dynamic memory decoder."""

from .config import RunConfig, desk_profile, paper_profile
from .model import HrvvsNet, VideoState

__version__ = "0.1.0"

__all__ = [
    "HrvvsNet",
    "RunConfig",
    "VideoState",
    "desk_profile",
    "paper_profile",
    "__version__",
]
