"""The multi-plane image value type and the over-compositing renderer.

An MPI is D fronto-parallel RGBA planes in the reference camera frustum,
ordered far to near. Compositing follows

    out = sum_d c_d * a_d * prod_{i>d} (1 - a_i)

where the product is the transmittance of the planes in front of d.
All gradients here avoid division so opaque planes (alpha == 1) are safe.
"""

from dataclasses import dataclass

import numpy as np

from lfield.geometry import (
    CameraModel,
    ParameterError,
    forward_homography,
    sample_bilinear,
    scatter_bilinear,
    warp_coords,
)


@dataclass(frozen=True)
class Mpi:
    """D x H x W x {3,1} color/alpha planes plus their depths and camera."""

    color: np.ndarray   # D x H x W x 3 in [0, 1]
    alpha: np.ndarray   # D x H x W x 1 in [0, 1]
    depths: np.ndarray  # D, strictly decreasing (far to near)
    ref_camera: CameraModel

    def __post_init__(self):
        color = np.asarray(self.color, dtype=np.float64)
        alpha = np.asarray(self.alpha, dtype=np.float64)
        depths = np.asarray(self.depths, dtype=np.float64).reshape(-1)
        if color.ndim != 4 or color.shape[-1] != 3:
            raise ParameterError(f"color must be DxHxWx3, got {color.shape}")
        if alpha.shape != color.shape[:3] + (1,):
            raise ParameterError(f"alpha must be DxHxWx1, got {alpha.shape}")
        if depths.shape[0] != color.shape[0]:
            raise ParameterError("depth count must match plane count")
        if depths.shape[0] > 1 and not np.all(np.diff(depths) < 0):
            raise ParameterError("depths must be strictly decreasing (far to near)")
        if color.min() < -1e-9 or color.max() > 1 + 1e-9:
            raise ParameterError("color values must lie in [0, 1]")
        if alpha.min() < -1e-9 or alpha.max() > 1 + 1e-9:
            raise ParameterError("alpha values must lie in [0, 1]")
        if self.ref_camera.image_size != color.shape[1:3]:
            raise ParameterError("reference camera size must match plane size")
        object.__setattr__(self, "color", color)
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "depths", depths)

    @property
    def num_planes(self):
        return self.color.shape[0]

    def replace(self, color=None, alpha=None, depths=None, ref_camera=None):
        return Mpi(
            color=self.color if color is None else color,
            alpha=self.alpha if alpha is None else alpha,
            depths=self.depths if depths is None else depths,
            ref_camera=self.ref_camera if ref_camera is None else ref_camera,
        )


def transmittance(alpha: np.ndarray) -> np.ndarray:
    """Per plane, the product of (1 - alpha) over all planes in front of it."""
    one_minus = 1.0 - alpha
    t = np.ones_like(alpha)
    # back-to-front recurrence, no divisions
    for d in range(alpha.shape[0] - 2, -1, -1):
        t[d] = t[d + 1] * one_minus[d + 1]
    return t


def compose(color: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """Over-composite raw plane stacks (D x H x W x {3,1}) to an H x W x 3 image."""
    return np.sum(color * alpha * transmittance(alpha), axis=0)


def over_composite(m: Mpi) -> np.ndarray:
    return compose(m.color, m.alpha)


def alpha_gradient_values(alpha: np.ndarray) -> np.ndarray:
    """A_d = d(composite)/d(c_d) = alpha_d * transmittance_d, shape D x H x W x 1."""
    return alpha * transmittance(alpha)


def alpha_gradients(m: Mpi) -> np.ndarray:
    return alpha_gradient_values(m.alpha)


def alpha_gradients_vjp(alpha: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * alpha_gradient_values(alpha)) w.r.t. alpha.

    Uses the prefix/suffix product form

        dL/da_e = (u_e - acc_e) * B_e,
        acc_{e+1} = (1 - a_e) * acc_e + u_e * a_e,   acc_0 = 0,

    with B_e the transmittance; stable at alpha == 1.
    """
    b = transmittance(alpha)
    acc = np.zeros_like(alpha[0])
    out = np.empty_like(alpha)
    for e in range(alpha.shape[0]):
        out[e] = (upstream[e] - acc) * b[e]
        acc = (1.0 - alpha[e]) * acc + upstream[e] * alpha[e]
    return out


def compose_vjp(color, alpha, grad_image):
    """Gradients of sum(grad_image * compose(color, alpha)) w.r.t. both stacks."""
    a_grad = alpha_gradient_values(alpha)
    d_color = grad_image[None] * a_grad
    # alpha sees every color channel: fold channels into the upstream weights
    upstream = np.sum(grad_image[None] * color, axis=-1, keepdims=True)
    d_alpha = alpha_gradients_vjp(alpha, upstream)
    return d_color, d_alpha


def _plane_grids(m: Mpi, target: CameraModel):
    hh, ww = target.image_size
    return [
        warp_coords(forward_homography(m.ref_camera, target, float(d)), (hh, ww))
        for d in m.depths
    ]


def warp_planes(m: Mpi, target: CameraModel):
    """Resample every color/alpha plane into the target view."""
    grids = _plane_grids(m, target)
    wc = np.stack([sample_bilinear(m.color[d], *grids[d]) for d in range(m.num_planes)])
    wa = np.stack([sample_bilinear(m.alpha[d], *grids[d]) for d in range(m.num_planes)])
    return wc, wa, grids


def render_novel_view(m: Mpi, target: CameraModel) -> np.ndarray:
    """Warp every plane to the target camera and over-composite."""
    if target.image_size != m.ref_camera.image_size:
        raise ParameterError("target view must share the reference image size")
    wc, wa, _ = warp_planes(m, target)
    return compose(wc, wa)


def render_loss_gradients(m: Mpi, target: CameraModel, gt: np.ndarray):
    """Analytic gradient of the mean-squared render loss at a target view.

    Returns (dL/dcolor, dL/dalpha) in the reference frame. The target-view
    gradients are carried back through the transpose of the bilinear
    sampling kernel (scatter-add).
    """
    if gt.shape != target.image_size + (3,):
        raise ParameterError(f"ground truth shape {gt.shape} does not match target view")
    wc, wa, grids = warp_planes(m, target)
    render = compose(wc, wa)
    g = (2.0 / render.size) * (render - gt)
    d_wc, d_wa = compose_vjp(wc, wa, g)
    hw = m.ref_camera.image_size
    d_color = np.stack(
        [scatter_bilinear(d_wc[d], *grids[d], hw) for d in range(m.num_planes)]
    )
    d_alpha = np.stack(
        [scatter_bilinear(d_wa[d], *grids[d], hw) for d in range(m.num_planes)]
    )
    return d_color, d_alpha


def empty_fraction(m: Mpi, threshold: float) -> float:
    """Fraction of voxels whose alpha falls below the given threshold."""
    if not 0.0 <= threshold <= 1.0:
        raise ParameterError(f"threshold must be in [0, 1], got {threshold}")
    return float(np.mean(m.alpha < threshold))
