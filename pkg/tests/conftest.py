import numpy as np
import pytest

from lfield.geometry import CameraModel


def simple_camera(h=8, w=8, focal=None, cx=None, cy=None, t=(0.0, 0.0, 0.0), R=None):
    focal = float(max(h, w)) if focal is None else focal
    cx = (w - 1) / 2.0 if cx is None else cx
    cy = (h - 1) / 2.0 if cy is None else cy
    K = np.array([[focal, 0.0, cx], [0.0, focal, cy], [0.0, 0.0, 1.0]])
    R = np.eye(3) if R is None else R
    return CameraModel(K, R, np.asarray(t, dtype=float), (h, w))


def smooth_image(rng, h, w, c=3, lo=0.1, hi=0.9):
    """Band-limited random texture: coarse noise bilinearly upsampled."""
    coarse = rng.uniform(lo, hi, size=(max(2, h // 4), max(2, w // 4), c))
    ys = np.linspace(0, coarse.shape[0] - 1, h)
    xs = np.linspace(0, coarse.shape[1] - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, coarse.shape[0] - 1)
    x1 = np.minimum(x0 + 1, coarse.shape[1] - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    img = (
        coarse[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
        + coarse[np.ix_(y0, x1)] * (1 - fy) * fx
        + coarse[np.ix_(y1, x0)] * fy * (1 - fx)
        + coarse[np.ix_(y1, x1)] * fy * fx
    )
    return img


@pytest.fixture
def rng():
    return np.random.default_rng(0)
