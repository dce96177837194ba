"""Gradient-volume assembly, top-k sparsification, and the sparse update.

Channel layout of the gradient volume (C = 4N + 4, fixed):

    [0, 3N)        PSV colors, view-major RGB
    [3N, 4N)       per-view alpha gradients, inverse-warped to the reference
    [4N, 4N+3)     current MPI color
    [4N+3, 4N+4)   current MPI alpha

Depth indices are 0-based with index 0 the farthest plane. Selected slabs
keep ascending depth order so the surface structure survives sparsification.
"""

from dataclasses import dataclass

import numpy as np

from lfield.geometry import (
    ParameterError,
    forward_homography,
    inverse_homography,
    sample_bilinear,
    scatter_bilinear,
    warp_coords,
)
from lfield.mpi_core import Mpi, alpha_gradient_values, alpha_gradients_vjp
from lfield.psv import Psv

ALPHA_EPS = 1e-4  # clamp before logit so additive alpha updates stay bounded


@dataclass(frozen=True)
class GradientVolume:
    """C x D x H x W concatenation of PSV, warped alpha gradients, and MPI."""

    data: np.ndarray
    num_views: int

    def __post_init__(self):
        if self.data.shape[0] != 4 * self.num_views + 4:
            raise ParameterError(
                f"expected {4 * self.num_views + 4} channels, got {self.data.shape[0]}"
            )
        if not np.isfinite(self.data).all():
            raise ParameterError("gradient volume contains non-finite values")


@dataclass(frozen=True)
class SparseVolume:
    """C x k x H x W slab gathered at the selected depth indices."""

    data: np.ndarray


@dataclass(frozen=True)
class SparseIndices:
    """k x H x W depth indices, strictly increasing per pixel."""

    indices: np.ndarray
    num_planes: int

    def __post_init__(self):
        idx = self.indices
        if idx.min() < 0 or idx.max() >= self.num_planes:
            raise ParameterError("sparse indices out of range")
        if idx.shape[0] > 1 and not (np.diff(idx, axis=0) > 0).all():
            raise ParameterError("sparse indices must be strictly increasing per pixel")


def formulate_gradients(m: Mpi, p: Psv, with_tape: bool = False):
    """Assemble the gradient volume [PSV, warped alpha gradients, MPI].

    Per source view the MPI alpha planes are warped into that view, the
    alpha gradients are computed there, and each gradient plane is warped
    back to the reference frame.

    With `with_tape` the return value also carries the intermediates needed
    for the reverse pass (`formulate_gradients_vjp`).
    """
    if p.num_planes != m.num_planes or p.image_size != m.color.shape[1:3]:
        raise ParameterError("MPI and PSV disagree on plane count or image size")
    if not np.allclose(p.depths, m.depths):
        raise ParameterError("MPI and PSV disagree on plane depths")
    n = p.num_views
    d, hh, ww = m.alpha.shape[:3]
    ref = m.ref_camera

    warped_gradients = []
    tape = {"fwd_grids": [], "inv_grids": [], "warped_alpha": []}
    for cam in p.view_cameras:
        fwd = [
            warp_coords(forward_homography(ref, cam, float(dep)), (hh, ww))
            for dep in m.depths
        ]
        inv = [
            warp_coords(inverse_homography(ref, cam, float(dep)), (hh, ww))
            for dep in m.depths
        ]
        a_view = np.stack([sample_bilinear(m.alpha[i], *fwd[i]) for i in range(d)])
        a_grad = alpha_gradient_values(a_view)
        a_back = np.stack([sample_bilinear(a_grad[i], *inv[i]) for i in range(d)])
        warped_gradients.append(a_back[..., 0])
        if with_tape:
            tape["fwd_grids"].append(fwd)
            tape["inv_grids"].append(inv)
            tape["warped_alpha"].append(a_view)

    psv_channels = np.moveaxis(p.data, -1, 1).reshape(3 * n, d, hh, ww)
    mpi_color = np.moveaxis(m.color, -1, 0)
    mpi_alpha = np.moveaxis(m.alpha, -1, 0)
    data = np.concatenate(
        [psv_channels, np.stack(warped_gradients), mpi_color, mpi_alpha], axis=0
    )
    v = GradientVolume(data, n)
    return (v, tape) if with_tape else v


def formulate_gradients_vjp(tape, m: Mpi, p: Psv, d_volume: np.ndarray):
    """Backward pass of `formulate_gradients` onto the MPI color and alpha."""
    n = p.num_views
    d, hh, ww = m.alpha.shape[:3]
    hw = (hh, ww)
    d_color = np.moveaxis(d_volume[4 * n : 4 * n + 3], 0, -1).copy()
    d_alpha = np.moveaxis(d_volume[4 * n + 3 : 4 * n + 4], 0, -1).copy()
    for i in range(n):
        up_back = d_volume[3 * n + i][..., None]
        fwd, inv = tape["fwd_grids"][i], tape["inv_grids"][i]
        d_a_grad = np.stack(
            [scatter_bilinear(up_back[j], *inv[j], hw) for j in range(d)]
        )
        d_a_view = alpha_gradients_vjp(tape["warped_alpha"][i], d_a_grad)
        d_alpha += np.stack(
            [scatter_bilinear(d_a_view[j], *fwd[j], hw) for j in range(d)]
        )
    return d_color, d_alpha


def _gather(data: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Gather a C x D x H x W volume at k x H x W depth indices."""
    idx = np.broadcast_to(indices[None], (data.shape[0],) + indices.shape)
    return np.take_along_axis(data, idx, axis=1)


def gather_volume(v: GradientVolume, s: SparseIndices) -> SparseVolume:
    return SparseVolume(_gather(v.data, s.indices))


def scatter_add_planes(shape_d, indices, values):
    """Adjoint of `_gather`: place slab values at their depth indices (zeros elsewhere)."""
    out = np.zeros((values.shape[0], shape_d) + values.shape[2:], dtype=values.dtype)
    idx = np.broadcast_to(indices[None], values.shape)
    np.put_along_axis(out, idx, values, axis=1)  # per-pixel indices are distinct
    return out


def topk_indices(gate: np.ndarray, k: int) -> np.ndarray:
    """Per pixel, the k depth indices with the largest gate values, ascending.

    Ties break toward the smaller depth index.
    """
    d = gate.shape[0]
    if not 1 <= k <= d:
        raise ParameterError(f"k must be in [1, {d}], got {k}")
    order = np.argsort(-gate, axis=0, kind="stable")[:k]
    return np.sort(order, axis=0)


def sparsify_topk(v: GradientVolume, gate: np.ndarray, k: int):
    """Keep the k voxels with the highest reference-view alpha gradient."""
    gate = np.asarray(gate)
    if gate.ndim == 4:
        gate = gate[..., 0]
    if gate.shape != v.data.shape[1:]:
        raise ParameterError("gate shape must be D x H x W")
    s = SparseIndices(topk_indices(gate, k), v.data.shape[1])
    return gather_volume(v, s), s


def mvs_window_indices(gate: np.ndarray, k: int) -> np.ndarray:
    """Contiguous window of k depths centered on the per-pixel argmax gate.

    The window shifts inward at the volume borders so its size is preserved.
    k must be odd (center plane plus (k-1)/2 neighbors on each side).
    """
    d = gate.shape[0]
    if not 1 <= k <= d:
        raise ParameterError(f"k must be in [1, {d}], got {k}")
    if k % 2 == 0 and k != d:
        raise ParameterError(f"window size must be odd (or the full depth range), got {k}")
    center = np.argmax(gate, axis=0)
    start = np.clip(center - (k - 1) // 2, 0, d - k)
    return start[None] + np.arange(k)[:, None, None]


def select_indices(gate: np.ndarray, sparsifier: str, k: int) -> SparseIndices:
    """Per-pixel depth selection without touching a gradient volume."""
    gate = np.asarray(gate)
    if gate.ndim == 4:
        gate = gate[..., 0]
    if gate.ndim != 3:
        raise ParameterError("gate shape must be D x H x W")
    d = gate.shape[0]
    if sparsifier == "dense":
        return SparseIndices(np.broadcast_to(np.arange(d)[:, None, None], gate.shape), d)
    if sparsifier == "topk":
        return SparseIndices(topk_indices(gate, k), d)
    if sparsifier == "mvs-window":
        return SparseIndices(mvs_window_indices(gate, k), d)
    raise ParameterError(f"unknown sparsifier {sparsifier!r}")


def sparsify_mvs_window(v: GradientVolume, gate: np.ndarray, k: int):
    """Gather the mvs-window slab of a gradient volume; see mvs_window_indices."""
    gate = np.asarray(gate)
    if gate.ndim == 4:
        gate = gate[..., 0]
    s = SparseIndices(mvs_window_indices(gate, k), v.data.shape[1])
    return gather_volume(v, s), s


def restore_and_update(
    m: Mpi,
    residual: np.ndarray,
    s: SparseIndices,
    alpha_rule: str = "logit",
    with_tape: bool = False,
):
    """Scatter a 4 x k x H x W residual back into the MPI and add it.

    Color updates are plain additions clamped to [0, 1]. Alpha updates are
    applied in logit space by default ("logit"), keeping alpha inside (0, 1)
    without projection; "linear" adds and clamps instead.
    """
    res = np.asarray(residual, dtype=np.float64)
    if res.ndim != 4 or res.shape[0] != 4 or res.shape[1:] != s.indices.shape:
        raise ParameterError(f"residual must be 4 x k x H x W matching indices, got {res.shape}")
    if s.num_planes != m.num_planes:
        raise ParameterError("index plane count does not match the MPI")
    if alpha_rule not in ("logit", "linear"):
        raise ParameterError(f"unknown alpha rule {alpha_rule!r}")

    idx = s.indices
    color = m.color.copy()
    alpha = m.alpha.copy()
    idx_c = np.broadcast_to(idx[..., None], idx.shape + (3,))
    idx_a = idx[..., None]
    cur_c = np.take_along_axis(color, idx_c, axis=0)
    cur_a = np.take_along_axis(alpha, idx_a, axis=0)
    res_c = np.moveaxis(res[:3], 0, -1)
    res_a = res[3][..., None]

    raw_c = cur_c + res_c
    new_c = np.clip(raw_c, 0.0, 1.0)
    if alpha_rule == "logit":
        a_safe = np.clip(cur_a, ALPHA_EPS, 1.0 - ALPHA_EPS)
        z = np.log(a_safe) - np.log1p(-a_safe) + res_a
        new_a = 1.0 / (1.0 + np.exp(-z))
    else:
        new_a = np.clip(cur_a + res_a, 0.0, 1.0)

    np.put_along_axis(color, idx_c, new_c, axis=0)
    np.put_along_axis(alpha, idx_a, new_a, axis=0)
    updated = m.replace(color=color, alpha=alpha)
    if not with_tape:
        return updated
    tape = {
        "indices": idx,
        "alpha_rule": alpha_rule,
        "color_pass": (raw_c > 0.0) & (raw_c < 1.0),
        "cur_a": cur_a,
        "new_a": new_a,
        "alpha_clip_pass": (cur_a > ALPHA_EPS) & (cur_a < 1.0 - ALPHA_EPS),
    }
    return updated, tape


def restore_and_update_vjp(tape, d_color_new, d_alpha_new):
    """Backward pass of `restore_and_update`.

    Returns (d_residual, d_color_in, d_alpha_in). Clamps use the usual
    zero-outside subgradient.
    """
    idx = tape["indices"]
    idx_c = np.broadcast_to(idx[..., None], idx.shape + (3,))
    idx_a = idx[..., None]

    d_color_in = d_color_new.copy()
    d_alpha_in = d_alpha_new.copy()
    d_sel_c = np.take_along_axis(d_color_new, idx_c, axis=0) * tape["color_pass"]
    d_sel_a_out = np.take_along_axis(d_alpha_new, idx_a, axis=0)

    if tape["alpha_rule"] == "logit":
        sig_grad = tape["new_a"] * (1.0 - tape["new_a"])
        d_res_a = d_sel_a_out * sig_grad
        a_safe = np.clip(tape["cur_a"], ALPHA_EPS, 1.0 - ALPHA_EPS)
        d_sel_a_in = d_res_a / (a_safe * (1.0 - a_safe)) * tape["alpha_clip_pass"]
    else:
        d_res_a = d_sel_a_out
        d_sel_a_in = d_sel_a_out

    # selected voxels: the incoming value flows only through the update path
    np.put_along_axis(d_color_in, idx_c, d_sel_c, axis=0)
    np.put_along_axis(d_alpha_in, idx_a, d_sel_a_in, axis=0)
    d_residual = np.concatenate(
        [np.moveaxis(d_sel_c, -1, 0), d_res_a[None, ..., 0]], axis=0
    )
    return d_residual, d_color_in, d_alpha_in
