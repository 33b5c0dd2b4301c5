"""splatopt: CPU trainer for 3D Gaussian splatting with multi-view
regulated optimization, coarse-to-fine intrinsic pyramids, and
geometry-guided densification."""

from . import core, densify, loss, optim, pyramid, raster, sceneio
from .core import Camera, GaussianCloud, TrainConfig, validate_cloud

__all__ = [
    "core",
    "raster",
    "loss",
    "optim",
    "densify",
    "pyramid",
    "sceneio",
    "Camera",
    "GaussianCloud",
    "TrainConfig",
    "validate_cloud",
]

__version__ = "0.1.0"
