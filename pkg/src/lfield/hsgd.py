"""Coarse-to-fine sparse gradient-descent reconstruction of an MPI.

The pipeline builds a plane-sweep pyramid from the posed input views,
initializes a low-resolution MPI at the coarsest level, and refines it
level by level: upsample, formulate the gradient volume, gate by the
reference-view alpha gradients, keep the k most relevant depths per pixel,
run the update operator on the slab, and scatter the residual back.
"""

import time
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    CameraModel,
    DepthSampling,
    NumericError,
    ParameterError,
    Spacing,
    depth_planes,
)
from .mpi_core import Mpi, alpha_gradients, render_novel_view
from .psv import box_downsample, build_psv, build_pyramid
from .sparsify import (
    SparseIndices,
    SparseVolume,
    formulate_gradients,
    gather_volume,
    restore_and_update,
    select_indices,
    sparsify_mvs_window,
    sparsify_topk,
)
from .update_ops import (
    analytic_residual_dense,
    conv_forward,
    init_mpi_heuristic,
    init_mpi_network,
)

SPARSIFIERS = ("topk", "mvs-window", "dense")
UPDATES = ("analytic", "learned")


@dataclass(frozen=True)
class HsgdConfig:
    """Pipeline configuration.

    `levels` is the number of refinement passes; the plane-sweep pyramid has
    that many resolutions (levels - 1 halvings), the coarse initialization
    does not consume a pass. "dense" is the reference path that updates all
    D depths per pixel; "topk" and "mvs-window" with k = D match it exactly.
    """

    planes: int = 40
    levels: int = 3
    k: int = 5
    sparsifier: str = "topk"
    update: str = "analytic"
    step: float = 100.0
    steps_per_level: int = 1
    near: float = 1.0
    far: float = 10.0
    spacing: Spacing = Spacing.INVERSE_DEPTH
    alpha_rule: str = "logit"
    sparsity_weight: float = 0.0
    line_search: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.levels < 1:
            raise ParameterError(f"levels must be >= 1, got {self.levels}")
        if not 1 <= self.k <= self.planes:
            raise ParameterError(f"k must be in [1, {self.planes}], got {self.k}")
        if self.sparsifier not in SPARSIFIERS:
            raise ParameterError(f"sparsifier must be one of {SPARSIFIERS}")
        if self.update not in UPDATES:
            raise ParameterError(f"update must be one of {UPDATES}")
        if self.step <= 0:
            raise ParameterError(f"step must be positive, got {self.step}")
        if self.steps_per_level < 1:
            raise ParameterError("steps_per_level must be >= 1")

    def depth_sampling(self):
        return DepthSampling(self.near, self.far, self.planes, self.spacing)


@dataclass(frozen=True)
class LearnedOperators:
    """Network weights for the learned pipeline: one initializer and one
    update operator per refinement pass (coarse to fine)."""

    initializer: object
    updates: tuple

    def __post_init__(self):
        object.__setattr__(self, "updates", tuple(self.updates))


@dataclass
class IterationRecord:
    level: int
    step: int
    render_loss: float
    formulate_seconds: float
    update_seconds: float


def upsample_mpi(m: Mpi, out_size=None) -> Mpi:
    """Bilinear x2 upsampling of every plane; depths unchanged.

    `out_size` overrides the default (2H, 2W) target so odd pyramid sizes
    round-trip; it must stay within one pixel of doubling.
    """
    h, w = m.color.shape[1:3]
    if out_size is None:
        out_size = (2 * h, 2 * w)
    oh, ow = out_size
    if not (2 * h - 1 <= oh <= 2 * h and 2 * w - 1 <= ow <= 2 * w):
        raise ParameterError(f"upsample target {out_size} is not a x2 enlargement of {(h, w)}")
    wy = _resize_matrix(h, oh)
    wx = _resize_matrix(w, ow)
    color = _apply_resize(m.color, wy, wx)
    alpha = np.clip(_apply_resize(m.alpha, wy, wx), 0.0, 1.0)
    cam = m.ref_camera
    new_cam = _rescale_camera(cam, (oh, ow))
    return Mpi(np.clip(color, 0.0, 1.0), alpha, m.depths, new_cam)


def upsample_mpi_vjp(grad_color, grad_alpha, in_size):
    """Adjoint of `upsample_mpi` (ignoring the saturation clamps)."""
    h, w = in_size
    oh, ow = grad_color.shape[1:3]
    wy = _resize_matrix(h, oh)
    wx = _resize_matrix(w, ow)
    d_color = _apply_resize(grad_color, wy.T, wx.T)
    d_alpha = _apply_resize(grad_alpha, wy.T, wx.T)
    return d_color, d_alpha


def _resize_matrix(n_in, n_out):
    """n_out x n_in bilinear interpolation weights (align-corners-false)."""
    scale = n_in / n_out
    x = (np.arange(n_out) + 0.5) * scale - 0.5
    x = np.clip(x, 0.0, n_in - 1)
    lo = np.floor(x).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = x - lo
    m = np.zeros((n_out, n_in))
    m[np.arange(n_out), lo] += 1.0 - frac
    m[np.arange(n_out), hi] += frac
    return m


def _apply_resize(planes, wy, wx):
    # planes: D x H x W x C; contract H with wy, W with wx
    out = np.tensordot(planes, wy, axes=([1], [1]))  # D x W x C x H'
    out = np.tensordot(out, wx, axes=([1], [1]))  # D x C x H' x W'
    return np.moveaxis(out, (2, 3, 1), (1, 2, 3))


def _rescale_camera(cam: CameraModel, new_size) -> CameraModel:
    """Scale intrinsics so pixel centers track the continuous image plane."""
    oh, ow = new_size
    h, w = cam.image_size
    fy = oh / h
    fx = ow / w
    s = np.array(
        [[fx, 0.0, (fx - 1.0) / 2.0], [0.0, fy, (fy - 1.0) / 2.0], [0.0, 0.0, 1.0]]
    )
    return CameraModel(s @ cam.intrinsics, cam.rotation, cam.translation, (oh, ow))


def input_render_loss(m: Mpi, views) -> float:
    """Mean squared render error averaged over the posed input views."""
    total = 0.0
    for img, cam in views:
        r = render_novel_view(m, cam)
        total += float(np.mean((r - img) ** 2))
    return total / len(views)


def select_slab(volume, gate, sparsifier: str, k: int):
    """Dispatch to the configured sparsifier; "dense" keeps every depth."""
    if sparsifier == "dense":
        d, h, w = volume.data.shape[1:]
        idx = np.broadcast_to(np.arange(d)[:, None, None], (d, h, w))
        s = SparseIndices(idx, d)
        return gather_volume(volume, s), s
    if sparsifier == "topk":
        return sparsify_topk(volume, gate, k)
    if sparsifier == "mvs-window":
        return sparsify_mvs_window(volume, gate, k)
    raise ParameterError(f"sparsifier must be one of {SPARSIFIERS}")


def _refine_once(m, p, views, cfg, operator, label, loss_before=None):
    """One formulate / sparsify / update / restore pass.

    Returns the refined MPI, two timings (the dense gradient-volume
    formulation, and the sparse update stage proper -- index selection,
    slab gather, operator, scatter -- whose cost is proportional to k),
    and the render loss of the returned MPI. `loss_before` optionally
    supplies the render loss of `m` so the line search need not
    recompute it.
    """
    t0 = time.perf_counter()
    gate = alpha_gradients(m)[..., 0]
    if cfg.update == "learned":
        volume = formulate_gradients(m, p)
    else:
        # the dense residual field is part of gradient formulation, not
        # of the k-proportional update stage; it is linear in the step
        # size, so compute it once at unit step and rescale per trial
        base = analytic_residual_dense(
            m, views, 1.0, alpha_rule=cfg.alpha_rule, sparsity_weight=cfg.sparsity_weight
        )
    t1 = time.perf_counter()

    def apply_step(step):
        start = time.perf_counter()
        if cfg.update == "learned":
            vs, s = select_slab(volume, gate, cfg.sparsifier, cfg.k)
            res = conv_forward(operator, vs)
        else:
            s = select_indices(gate, cfg.sparsifier, cfg.k)
            res = (
                np.take_along_axis(
                    base, np.broadcast_to(s.indices[None], (4,) + s.indices.shape), axis=1
                )
                * step
            )
        out = restore_and_update(m, res, s, alpha_rule=cfg.alpha_rule)
        return out, time.perf_counter() - start

    if cfg.update == "analytic" and cfg.line_search:
        before = input_render_loss(m, views) if loss_before is None else loss_before
        step = cfg.step
        updated, t_update = apply_step(step)
        after = input_render_loss(updated, views)
        for _ in range(20):
            if after <= before:
                break
            step *= 0.5
            updated, t_update = apply_step(step)
            after = input_render_loss(updated, views)
        else:
            updated, after = m, before  # no acceptable step: keep the current MPI
    else:
        updated, t_update = apply_step(cfg.step)
        after = input_render_loss(updated, views)
    if not (np.isfinite(updated.color).all() and np.isfinite(updated.alpha).all()):
        raise NumericError(f"non-finite MPI values at {label}")
    return updated, t1 - t0, t_update, after


def run(images, cameras, ref: CameraModel, cfg: HsgdConfig, operators=None, initial_mpi=None):
    """Reconstruct an MPI from posed views.

    Returns (mpi, trace) where trace lists one `IterationRecord` per
    refinement step. `operators` supplies `LearnedOperators` when
    cfg.update == "learned"; `initial_mpi` warm-starts the coarsest level
    in place of the initializer (it must match that level's resolution).
    """
    if len(images) < 1 or len(images) != len(cameras):
        raise ParameterError("need at least one image with a matching camera")
    if cfg.update == "learned" and operators is None:
        raise ParameterError("learned update requires trained operators")

    psv0 = build_psv(images, ref, cameras, depth_planes(cfg.depth_sampling()))
    pyramid = build_pyramid(psv0, cfg.levels - 1)

    # matching image pyramid for the per-level render loss
    image_levels = [list(images)]
    for _ in range(cfg.levels - 1):
        image_levels.append([box_downsample(img) for img in image_levels[-1]])

    coarse = pyramid.levels[-1]
    if initial_mpi is not None:
        if initial_mpi.color.shape[1:3] != coarse.image_size:
            raise ParameterError("initial MPI resolution must match the coarsest level")
        if initial_mpi.num_planes != cfg.planes or not np.allclose(
            initial_mpi.depths, coarse.depths
        ):
            raise ParameterError("initial MPI depth planes must match the configuration")
        m = initial_mpi.replace(ref_camera=coarse.ref_camera)
    elif cfg.update == "learned":
        m = init_mpi_network(operators.initializer, coarse)
    else:
        m = init_mpi_heuristic(coarse)

    trace = []
    for pass_index, level in enumerate(reversed(range(cfg.levels))):
        p = pyramid.levels[level]
        if m.color.shape[1:3] != p.image_size:
            m = upsample_mpi(m, out_size=p.image_size)
            m = m.replace(ref_camera=p.ref_camera)
        views = list(zip(image_levels[level], p.view_cameras))
        operator = None
        if cfg.update == "learned":
            operator = operators.updates[min(pass_index, len(operators.updates) - 1)]
        loss = None  # the render loss is level-specific: reset at each level
        for step_index in range(cfg.steps_per_level):
            label = f"level {level} step {step_index}"
            m, t_form, t_upd, loss = _refine_once(m, p, views, cfg, operator, label, loss)
            trace.append(IterationRecord(level, step_index, loss, t_form, t_upd))
    return m, trace
