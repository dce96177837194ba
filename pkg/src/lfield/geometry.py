"""Camera models, per-depth homographies, and bilinear warping.

Conventions:
  - Pixel coordinates (u, v) with u along width and v along height,
    pixel centers at integer coordinates.
  - Rotations are world-to-camera; x_cam = R @ x_world + t.
  - Depth planes are fronto-parallel in the reference camera frame,
    ordered far to near (index 0 is the farthest plane).
  - Geometry math in float64; image payloads pass through unchanged.
"""

from dataclasses import dataclass
from enum import Enum

import numpy as np


class ParameterError(ValueError):
    """Raised when an operation receives invalid arguments."""


class NumericError(ArithmeticError):
    """Raised when a computation degenerates (singular matrix, non-finite)."""


_DEFAULT_NORMAL = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraModel:
    """Pinhole camera: intrinsics plus world-to-camera pose."""

    intrinsics: np.ndarray   # 3x3 K, upper triangular, pixels
    rotation: np.ndarray     # 3x3 world-to-camera R
    translation: np.ndarray  # 3-vector t, world units
    image_size: tuple        # (H, W)

    def __post_init__(self):
        K = np.asarray(self.intrinsics, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        h, w = self.image_size
        if h <= 0 or w <= 0:
            raise ParameterError(f"image_size must be positive, got {self.image_size}")
        if K[0, 0] <= 0 or K[1, 1] <= 0:
            raise ParameterError("focal entries of K must be positive")
        if abs(K[1, 0]) > 1e-9 or abs(K[2, 0]) > 1e-9 or abs(K[2, 1]) > 1e-9:
            raise ParameterError("K must be upper triangular")
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ParameterError("rotation must be orthonormal within 1e-6")
        object.__setattr__(self, "intrinsics", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(h), int(w)))

    def same_pose(self, other, tol=0.0):
        return (
            np.max(np.abs(self.intrinsics - other.intrinsics)) <= tol
            and np.max(np.abs(self.rotation - other.rotation)) <= tol
            and np.max(np.abs(self.translation - other.translation)) <= tol
        )


class Spacing(str, Enum):
    INVERSE_DEPTH = "inverse-depth"
    LINEAR = "linear"


@dataclass(frozen=True)
class DepthSampling:
    near: float
    far: float
    count: int
    spacing: Spacing = Spacing.INVERSE_DEPTH

    def __post_init__(self):
        if self.near <= 0 or self.far < self.near:
            raise ParameterError(f"need 0 < near <= far, got near={self.near} far={self.far}")
        if self.count < 1:
            raise ParameterError(f"count must be >= 1, got {self.count}")
        if self.count > 1 and self.far <= self.near:
            raise ParameterError("near < far required for more than one plane")
        object.__setattr__(self, "spacing", Spacing(self.spacing))


def depth_planes(sampling: DepthSampling) -> np.ndarray:
    """Depths of the D planes, ordered far to near.

    Inverse-depth mode spaces the reciprocals uniformly between 1/far
    and 1/near; linear mode spaces the depths themselves.
    """
    d = sampling.count
    if d == 1:
        return np.array([float(sampling.far)])
    if sampling.spacing is Spacing.LINEAR:
        return np.linspace(sampling.far, sampling.near, d)
    return 1.0 / np.linspace(1.0 / sampling.far, 1.0 / sampling.near, d)


def scale_camera(cam: CameraModel, factor: float, new_size) -> CameraModel:
    """Camera for a resampled image grid.

    With pixel centers at integers, downscaling by `factor` maps old pixel
    coordinates x to factor * x + (factor - 1) / 2.
    """
    s = np.array(
        [
            [factor, 0.0, (factor - 1.0) / 2.0],
            [0.0, factor, (factor - 1.0) / 2.0],
            [0.0, 0.0, 1.0],
        ]
    )
    return CameraModel(s @ cam.intrinsics, cam.rotation, cam.translation, tuple(new_size))


def inverse_homography(ref: CameraModel, src: CameraModel, d: float, n=None) -> np.ndarray:
    """Homography mapping reference pixels to source pixels at plane depth d.

    H = K_i R_i (I + (R_i^-1 t_i - R_r^-1 t_r) n^T R_r / d) R_r^-1 K_r^-1
    with n the plane normal in the reference camera frame.
    """
    if d <= 0:
        raise ParameterError(f"plane depth must be positive, got {d}")
    n = _DEFAULT_NORMAL if n is None else np.asarray(n, dtype=np.float64).reshape(3)
    if src.same_pose(ref):
        return np.eye(3)
    Kr, Rr, tr = ref.intrinsics, ref.rotation, ref.translation
    Ki, Ri, ti = src.intrinsics, src.rotation, src.translation
    if abs(np.linalg.det(Kr)) < 1e-12 or abs(np.linalg.det(Ki)) < 1e-12:
        raise ParameterError("singular intrinsics")
    delta = Ri.T @ ti - Rr.T @ tr
    mid = np.eye(3) + np.outer(delta, n @ Rr) / d
    return Ki @ Ri @ mid @ Rr.T @ np.linalg.inv(Kr)


def forward_homography(ref: CameraModel, src: CameraModel, d: float, n=None) -> np.ndarray:
    """Inverse of `inverse_homography`: maps source pixels back to reference pixels."""
    h = inverse_homography(ref, src, d, n)
    if src.same_pose(ref):
        return h
    det = np.linalg.det(h)
    if abs(det) < 1e-12:
        raise NumericError(f"near-singular homography at depth {d} (det={det:g})")
    return np.linalg.inv(h)


def warp_coords(h: np.ndarray, out_size) -> tuple:
    """Sampling coordinates (x, y) for each destination pixel under h."""
    hh, ww = out_size
    u, v = np.meshgrid(np.arange(ww, dtype=np.float64), np.arange(hh, dtype=np.float64))
    px = h[0, 0] * u + h[0, 1] * v + h[0, 2]
    py = h[1, 0] * u + h[1, 1] * v + h[1, 2]
    pw = h[2, 0] * u + h[2, 1] * v + h[2, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        x = px / pw
        y = py / pw
    bad = np.abs(pw) < 1e-12
    if bad.any():
        # behind-plane / degenerate rays sample nothing
        x = np.where(bad, -1e9, x)
        y = np.where(bad, -1e9, y)
    return x, y


def _tap_weights(x, y, shape):
    """Integer taps and bilinear weights; out-of-bounds taps get weight zero."""
    hh, ww = shape
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    taps = []
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi = x0 + dx
            yi = y0 + dy
            inb = (xi >= 0) & (xi < ww) & (yi >= 0) & (yi < hh)
            w = wx * wy * inb
            taps.append((np.clip(yi, 0, hh - 1), np.clip(xi, 0, ww - 1), w))
    return taps


def sample_bilinear(image: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Bilinear sample of an H x W x C image at (x, y), zero outside."""
    squeeze = image.ndim == 2
    img = image[..., None] if squeeze else image
    out = np.zeros(x.shape + (img.shape[-1],), dtype=img.dtype)
    for yi, xi, w in _tap_weights(x, y, img.shape[:2]):
        out += img[yi, xi] * w[..., None]
    return out[..., 0] if squeeze else out


def scatter_bilinear(grad: np.ndarray, x, y, src_shape) -> np.ndarray:
    """Adjoint of `sample_bilinear`: scatter gradient mass back to the source grid."""
    squeeze = grad.ndim == 2
    g = grad[..., None] if squeeze else grad
    hh, ww = src_shape
    c = g.shape[-1]
    out = np.zeros(hh * ww * c, dtype=np.float64)
    chan = np.arange(c)
    for yi, xi, w in _tap_weights(x, y, (hh, ww)):
        flat = ((yi * ww + xi)[..., None] * c + chan).ravel()
        out += np.bincount(flat, weights=(g * w[..., None]).ravel(), minlength=out.size)
    out = out.reshape(hh, ww, c)
    return out[..., 0] if squeeze else out


def warp_image(image: np.ndarray, h: np.ndarray, out_size=None) -> np.ndarray:
    """Warp an image by a homography: destination (u,v) samples the source
    at h @ [u, v, 1] with bilinear interpolation and zero padding."""
    out_size = image.shape[:2] if out_size is None else out_size
    x, y = warp_coords(np.asarray(h, dtype=np.float64), out_size)
    return sample_bilinear(image, x, y)


def warp_image_adjoint(grad: np.ndarray, h: np.ndarray, src_shape) -> np.ndarray:
    """Transpose of `warp_image` as a linear map on images."""
    x, y = warp_coords(np.asarray(h, dtype=np.float64), grad.shape[:2])
    return scatter_bilinear(grad, x, y, src_shape)
