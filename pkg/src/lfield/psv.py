"""Plane-sweep volume construction and the multi-resolution pyramid."""

from dataclasses import dataclass

import numpy as np

from lfield.geometry import (
    CameraModel,
    ParameterError,
    inverse_homography,
    scale_camera,
    warp_image,
)


@dataclass(frozen=True)
class Psv:
    """N x D x H x W x 3 stack of inverse-warped source images."""

    data: np.ndarray
    view_cameras: tuple       # N CameraModels
    ref_camera: CameraModel
    depths: np.ndarray        # D, far to near

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if data.ndim != 5 or data.shape[-1] != 3:
            raise ParameterError(f"PSV data must be NxDxHxWx3, got {data.shape}")
        if data.shape[0] != len(self.view_cameras) or data.shape[0] < 1:
            raise ParameterError("view count must match camera list")
        if data.shape[1] != depths.shape[0]:
            raise ParameterError("depth count must match data")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "view_cameras", tuple(self.view_cameras))
        object.__setattr__(self, "depths", depths)

    @property
    def num_views(self):
        return self.data.shape[0]

    @property
    def num_planes(self):
        return self.data.shape[1]

    @property
    def image_size(self):
        return self.data.shape[2:4]


@dataclass(frozen=True)
class PsvPyramid:
    """levels[0] is full resolution; each level halves H and W (ceil)."""

    levels: tuple

    def __len__(self):
        return len(self.levels)


def box_downsample(image: np.ndarray) -> np.ndarray:
    """2x2 box-filter average; odd tails average the available footprint."""
    h, w = image.shape[:2]
    edges_h = np.arange(0, h, 2)
    edges_w = np.arange(0, w, 2)
    len_h = np.minimum(edges_h + 2, h) - edges_h
    len_w = np.minimum(edges_w + 2, w) - edges_w
    out = np.add.reduceat(image, edges_h, axis=0)
    out = np.add.reduceat(out, edges_w, axis=1)
    return out / (len_h[:, None] * len_w[None, :]).reshape(
        len(edges_h), len(edges_w), *([1] * (image.ndim - 2))
    )


def build_psv(images, ref: CameraModel, cameras, depths) -> Psv:
    """Inverse-warp every source image onto every reference depth plane."""
    depths = np.asarray(depths, dtype=np.float64).reshape(-1)
    if len(images) != len(cameras):
        raise ParameterError("image and camera counts differ")
    hw = ref.image_size
    for img, cam in zip(images, cameras):
        if img.shape[:2] != hw or cam.image_size != hw:
            raise ParameterError("all views must share the reference image size")
    data = np.stack(
        [
            np.stack([warp_image(img, inverse_homography(ref, cam, float(d))) for d in depths])
            for img, cam in zip(images, cameras)
        ]
    )
    return Psv(data, tuple(cameras), ref, depths)


def downsample_psv(p: Psv) -> Psv:
    n, d = p.num_views, p.num_planes
    planes = p.data.reshape(n * d, *p.data.shape[2:])
    down = np.stack([box_downsample(pl) for pl in planes])
    down = down.reshape(n, d, *down.shape[1:])
    new_size = down.shape[2:4]
    cams = tuple(scale_camera(c, 0.5, new_size) for c in p.view_cameras)
    ref = scale_camera(p.ref_camera, 0.5, new_size)
    return Psv(down, cams, ref, p.depths)


def build_pyramid(p: Psv, levels: int) -> PsvPyramid:
    """levels+1 volumes, each a box-filtered halving of the previous one."""
    if levels < 0:
        raise ParameterError("levels must be >= 0")
    out = [p]
    for _ in range(levels):
        if min(out[-1].image_size) <= 1:
            raise ParameterError("pyramid level would collapse a spatial dimension")
        out.append(downsample_psv(out[-1]))
    return PsvPyramid(tuple(out))
