import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lfield.geometry import (
    CameraModel,
    DepthSampling,
    ParameterError,
    depth_planes,
    forward_homography,
    inverse_homography,
    warp_image,
    warp_image_adjoint,
)
from tests.conftest import simple_camera, smooth_image


class TestCameraModel:
    def test_rejects_non_orthonormal_rotation(self):
        with pytest.raises(ParameterError):
            CameraModel(np.eye(3), np.eye(3) * 1.01, np.zeros(3), (4, 4))

    def test_rejects_lower_triangular_k(self):
        K = np.array([[1.0, 0, 0], [0.5, 1.0, 0], [0, 0, 1.0]])
        with pytest.raises(ParameterError):
            CameraModel(K, np.eye(3), np.zeros(3), (4, 4))

    def test_rejects_bad_size(self):
        with pytest.raises(ParameterError):
            CameraModel(np.eye(3), np.eye(3), np.zeros(3), (0, 4))


class TestDepthPlanes:
    def test_single_plane(self):
        assert depth_planes(DepthSampling(1.0, 1.0, 1, "linear")).tolist() == [1.0]
        assert depth_planes(DepthSampling(1.0, 1.0, 1, "inverse-depth")).tolist() == [1.0]

    def test_linear_far_to_near(self):
        d = depth_planes(DepthSampling(1.0, 3.0, 3, "linear"))
        np.testing.assert_allclose(d, [3.0, 2.0, 1.0])

    def test_inverse_depth_uniform_reciprocals(self):
        # reciprocals uniform at 1/2, 3/4, 1
        d = depth_planes(DepthSampling(1.0, 2.0, 3, "inverse-depth"))
        np.testing.assert_allclose(d, [2.0, 4.0 / 3.0, 1.0])

    def test_invalid_sampling(self):
        with pytest.raises(ParameterError):
            DepthSampling(0.0, 1.0, 4)
        with pytest.raises(ParameterError):
            DepthSampling(2.0, 1.0, 4)
        with pytest.raises(ParameterError):
            DepthSampling(1.0, 2.0, 0)


class TestHomography:
    def test_same_camera_is_identity(self):
        cam = simple_camera(8, 10, t=(0.3, -0.2, 0.1))
        for d in (0.5, 1.0, 7.3):
            np.testing.assert_allclose(inverse_homography(cam, cam, d), np.eye(3), atol=1e-12)

    def test_plane_at_infinity_kills_translation(self):
        th = 0.3
        R = np.array(
            [[np.cos(th), 0, np.sin(th)], [0, 1, 0], [-np.sin(th), 0, np.cos(th)]]
        )
        ref = simple_camera(8, 8)
        src = simple_camera(8, 8, R=R, t=(1.0, 2.0, 3.0))
        h = inverse_homography(ref, src, 1e12)
        expect = src.intrinsics @ R @ np.linalg.inv(ref.intrinsics)
        assert np.max(np.abs(h - expect)) < 1e-6

    def test_translated_camera_shifts_by_disparity(self):
        # identity K, baseline b along x, depth 2 -> sampling offset -b/2 in u,
        # evaluated against direct matrix arithmetic of the warp formula
        b = 0.8
        K = np.eye(3)
        ref = CameraModel(K, np.eye(3), np.zeros(3), (4, 4))
        src = CameraModel(K, np.eye(3), np.array([-b, 0.0, 0.0]), (4, 4))
        h = inverse_homography(ref, src, 2.0)
        oracle = np.eye(3)
        oracle[0, 2] = -b / 2.0
        np.testing.assert_allclose(h, oracle, atol=1e-12)

    def test_forward_inverse_compose_to_identity(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            th = rng.uniform(-0.2, 0.2)
            R = np.array(
                [[np.cos(th), -np.sin(th), 0], [np.sin(th), np.cos(th), 0], [0, 0, 1]]
            )
            ref = simple_camera(12, 12)
            src = simple_camera(12, 12, R=R, t=rng.uniform(-0.5, 0.5, 3))
            d = rng.uniform(1.0, 5.0)
            prod = forward_homography(ref, src, d) @ inverse_homography(ref, src, d)
            assert np.max(np.abs(prod - np.eye(3))) < 1e-6

    def test_continuity_in_depth(self):
        ref = simple_camera(8, 8)
        src = simple_camera(8, 8, t=(0.2, 0.1, 0.0))
        h1 = inverse_homography(ref, src, 2.0)
        h2 = inverse_homography(ref, src, 2.0 + 1e-9)
        assert np.max(np.abs(h1 - h2)) < 1e-8

    @given(st.floats(min_value=0.5, max_value=50.0))
    @settings(max_examples=25, deadline=None)
    def test_invertible_at_any_depth(self, d):
        ref = simple_camera(6, 6)
        src = simple_camera(6, 6, t=(0.3, -0.1, 0.05))
        prod = forward_homography(ref, src, d) @ inverse_homography(ref, src, d)
        assert np.max(np.abs(prod - np.eye(3))) < 1e-6


class TestWarpImage:
    def test_identity_is_bit_equal(self, rng):
        img = rng.random((7, 9, 3))
        out = warp_image(img, np.eye(3))
        assert np.array_equal(out, img)

    def test_integer_shift_on_ramp(self):
        # content moved right by one pixel: first column has no source, so zero
        img = np.tile(np.arange(1.0, 6.0)[None, :, None], (4, 1, 1))
        h = np.array([[1.0, 0, -1.0], [0, 1.0, 0], [0, 0, 1.0]])
        out = warp_image(img, h)
        assert np.all(out[:, 0] == 0.0)
        np.testing.assert_allclose(out[:, 1:, 0], img[:, :-1, 0])

    def test_half_pixel_shift_interpolates(self):
        img = np.array([[0.0, 1.0]])[..., None]
        h = np.array([[1.0, 0, 0.5], [0, 1.0, 0], [0, 0, 1.0]])
        out = warp_image(img, h)
        assert out[0, 0, 0] == pytest.approx(0.5)

    def test_round_trip_small_on_smooth_interior(self, rng):
        img = smooth_image(rng, 24, 32)
        ref = simple_camera(24, 32)
        src = simple_camera(24, 32, t=(0.05, 0.02, 0.0))
        hi = inverse_homography(ref, src, 2.0)
        hf = forward_homography(ref, src, 2.0)
        back = warp_image(warp_image(img, hi), hf)
        err = np.abs(back - img)[2:-2, 2:-2]
        assert err.mean() < 2e-2

    def test_adjoint_identity(self, rng):
        # <warp(x), y> == <x, warp_adjoint(y)> for a generic homography
        ref = simple_camera(9, 11)
        src = simple_camera(9, 11, t=(0.2, -0.1, 0.03))
        h = inverse_homography(ref, src, 1.7)
        x = rng.random((9, 11, 2))
        y = rng.random((9, 11, 2))
        lhs = np.sum(warp_image(x, h) * y)
        rhs = np.sum(x * warp_image_adjoint(y, h, (9, 11)))
        assert lhs == pytest.approx(rhs, rel=1e-12)
