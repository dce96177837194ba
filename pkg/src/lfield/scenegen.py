"""Synthetic multi-view scenes with analytically exact ground truth.

Every scene is a hand-built MPI whose content sits exactly on the depth
planes, plus a small camera rig; the "captured" images are rendered from
the ground-truth MPI, so a reconstruction pipeline run on them has a known
attainable optimum.
"""

from dataclasses import dataclass

import numpy as np

from .geometry import CameraModel, DepthSampling, ParameterError, depth_planes
from .mpi_core import Mpi, render_novel_view


@dataclass(frozen=True)
class CameraRig:
    """Reference camera at the origin, lateral sources, held-out targets.

    `targets[0]` sits inside the source hull (interpolation) and
    `targets[1]` outside it (extrapolation).
    """

    reference: CameraModel
    sources: tuple
    targets: tuple

    def __post_init__(self):
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass(frozen=True)
class SyntheticScene:
    mpi: Mpi
    rig: CameraRig
    reference_image: np.ndarray
    source_images: tuple
    target_images: tuple

    def __post_init__(self):
        object.__setattr__(self, "source_images", tuple(self.source_images))
        object.__setattr__(self, "target_images", tuple(self.target_images))


def make_rig(baseline: float, n: int, image_size, focal: float = None) -> CameraRig:
    """Reference at the origin plus n sources spread laterally at ±baseline."""
    if n < 1:
        raise ParameterError(f"need at least one source camera, got {n}")
    if baseline < 0:
        raise ParameterError(f"baseline must be non-negative, got {baseline}")
    h, w = image_size
    if focal is None:
        focal = 1.2 * max(h, w)
    k = np.array([[focal, 0.0, (w - 1) / 2.0], [0.0, focal, (h - 1) / 2.0], [0.0, 0.0, 1.0]])
    eye = np.eye(3)

    def cam(tx, ty=0.0):
        # world-to-camera translation: camera center c gives t = -R c
        return CameraModel(k, eye, np.array([-tx, -ty, 0.0]), (h, w))

    ref = cam(0.0)
    offsets = np.linspace(-baseline, baseline, n) if n > 1 else np.array([baseline])
    sources = tuple(cam(float(x), 0.12 * baseline * ((i % 2) * 2 - 1)) for i, x in enumerate(offsets))
    targets = (cam(0.4 * baseline, 0.05 * baseline), cam(1.6 * baseline, -0.1 * baseline))
    return CameraRig(ref, sources, targets)


def smooth_texture(rng, h, w, channels=3, lo=0.1, hi=0.9, cell=6):
    """Band-limited random texture: coarse noise bilinearly upsampled."""
    gh = max(2, h // cell + 2)
    gw = max(2, w // cell + 2)
    coarse = rng.uniform(lo, hi, size=(gh, gw, channels))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, gh - 1)
    x1 = np.minimum(x0 + 1, gw - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x1] * fx
    bot = coarse[y1][:, x0] * (1 - fx) + coarse[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy


def make_scene(
    seed: int,
    d: int,
    h: int,
    w: int,
    baseline: float = 0.08,
    num_sources: int = 3,
    near: float = 2.0,
    far: float = 8.0,
    semi_transparent: bool = True,
    thin_structure: bool = True,
) -> SyntheticScene:
    """Deterministic scene: opaque far plane, optional α=0.5 region on a
    middle plane, optional one-pixel-wide strip on a near plane."""
    if d < 2:
        raise ParameterError(f"need at least two depth planes, got {d}")
    rng = np.random.default_rng(seed)
    depths = depth_planes(DepthSampling(near, far, d))
    rig = make_rig(baseline, num_sources, (h, w))

    color = np.stack([smooth_texture(rng, h, w) for _ in range(d)])
    alpha = np.zeros((d, h, w, 1))
    alpha[0] = 1.0  # opaque background on the farthest plane

    if semi_transparent and d >= 3:
        mid = d // 2
        y0, y1 = h // 5, 3 * h // 5
        x0, x1 = w // 4, 3 * w // 4
        alpha[mid, y0:y1, x0:x1] = 0.5

    if thin_structure and d >= 2:
        near_plane = d - 1
        alpha[near_plane, :, 2 * w // 3] = 1.0  # vertical 1-px strip
        alpha[near_plane, h // 3, :] = 1.0  # horizontal 1-px strip

    mpi = Mpi(color, alpha, depths, rig.reference)
    ref_img = render_novel_view(mpi, rig.reference)
    src_imgs = tuple(render_novel_view(mpi, c) for c in rig.sources)
    tgt_imgs = tuple(render_novel_view(mpi, c) for c in rig.targets)
    return SyntheticScene(mpi, rig, ref_img, src_imgs, tgt_imgs)
