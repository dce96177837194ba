"""Image-quality metrics: PSNR, single-scale SSIM, and the sparse
color-recovery ratio used to justify per-pixel depth sparsification."""

import numpy as np

from .geometry import ParameterError
from .mpi_core import Mpi, alpha_gradients, over_composite
from .sparsify import topk_indices

PSNR_CAP = 99.0  # returned for a zero-MSE pair so scores stay finite and sortable


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10·log10(1/MSE) for images in [0, 1]; identical images score 99 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2.0 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _windowed_mean(img, window):
    view = np.lib.stride_tricks.sliding_window_view(img, window.shape)
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, k1=0.01, k2=0.03, window_size=11, sigma=1.5) -> float:
    """Single-scale SSIM with an 11×11 Gaussian window (σ=1.5), dynamic
    range 1.0, averaged over valid window positions. Color images are
    converted to grayscale by the channel mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 3:
        a = a.mean(axis=-1)
        b = b.mean(axis=-1)
    if min(a.shape) < window_size:
        raise ParameterError(f"image smaller than the {window_size}x{window_size} window")
    w = _gaussian_window(window_size, sigma)
    c1 = k1**2
    c2 = k2**2
    mu_a = _windowed_mean(a, w)
    mu_b = _windowed_mean(b, w)
    var_a = _windowed_mean(a * a, w) - mu_a**2
    var_b = _windowed_mean(b * b, w) - mu_b**2
    cov = _windowed_mean(a * b, w) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def color_recovery_ratio(m: Mpi, k: int, eps: float = 1e-6) -> dict:
    """How much of the full render survives keeping only the k most
    contributing depths per pixel (others' alpha zeroed).

    Returns per-pixel ratio statistics against the full-depth render:
    mean and median of the clipped sparse/full ratio plus the PSNR of the
    sparse render against the full one.
    """
    d = m.num_planes
    if not 1 <= k <= d:
        raise ParameterError(f"k must be in [1, {d}], got {k}")
    full = over_composite(m)
    gate = alpha_gradients(m)[..., 0]
    keep = topk_indices(gate, k)
    mask = np.zeros((d,) + gate.shape[1:] + (1,))
    np.put_along_axis(mask, keep[..., None], 1.0, axis=0)
    sparse = over_composite(m.replace(alpha=m.alpha * mask))
    valid = full > eps
    ratio = np.clip(np.divide(sparse, full, out=np.ones_like(full), where=valid), 0.0, 1.0)
    ratio = ratio[valid] if valid.any() else ratio.ravel()
    return {
        "mean_ratio": float(np.mean(ratio)),
        "median_ratio": float(np.median(ratio)),
        "psnr_vs_full": psnr(sparse, full),
    }
