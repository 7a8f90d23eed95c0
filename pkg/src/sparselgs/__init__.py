"""Sparse-view, pose-free language-embedded Gaussian splatting at desk scale."""

__version__ = "0.1.0"

from .scene import Camera, Gaussian3D, GaussianCloud, Granularity, PipelineConfig

__all__ = [
    "Camera",
    "Gaussian3D",
    "GaussianCloud",
    "Granularity",
    "PipelineConfig",
    "__version__",
]
