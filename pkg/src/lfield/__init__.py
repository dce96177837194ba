"""Light field reconstruction with multi-plane images.

Builds plane-sweep volumes from posed images, optimizes a multi-plane
image coarse-to-fine using scene-aligned sparse gradients, and renders
novel views from the result.
"""

from lfield.geometry import CameraModel, DepthSampling, depth_planes
from lfield.hsgd import HsgdConfig, LearnedOperators, run, upsample_mpi
from lfield.mpi_core import Mpi, over_composite, render_novel_view

__all__ = [
    "CameraModel",
    "DepthSampling",
    "depth_planes",
    "HsgdConfig",
    "LearnedOperators",
    "run",
    "upsample_mpi",
    "Mpi",
    "over_composite",
    "render_novel_view",
]
