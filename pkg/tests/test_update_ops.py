import numpy as np
import pytest

from lfield.geometry import ParameterError
from lfield.mpi_core import over_composite, render_novel_view
from lfield.psv import build_psv
from lfield.sparsify import (
    SparseIndices,
    SparseVolume,
    formulate_gradients,
    restore_and_update,
    sparsify_topk,
    topk_indices,
)
from lfield.update_ops import (
    ConvBlock,
    ConvNetParams,
    analytic_update,
    conv3d,
    conv_backward,
    conv_forward,
    init_mpi_heuristic,
    init_mpi_network,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from lfield.mpi_core import alpha_gradients
from tests.conftest import simple_camera, smooth_image
from tests.test_mpi_core import make_mpi, random_mpi, rel_err


def tiny_params(cin=6, hidden=3, blocks=2, seed=1):
    return init_params(cin, hidden=hidden, num_blocks=blocks, seed=seed)


class TestConvForward:
    def test_zero_weights_zero_residual(self, rng):
        p = tiny_params()
        for b in p.blocks:
            b.weight[:] = 0
            b.shift[:] = 0
        p.final_weight[:] = 0
        p.final_bias[:] = 0
        out = conv_forward(p, SparseVolume(rng.random((6, 3, 4, 4))))
        np.testing.assert_array_equal(out, 0.0)

    def test_identity_single_channel_net(self, rng):
        # one 1x1x1 "block-free" net with unit weight passes channel 0 through
        w = np.zeros((4, 1, 1, 1, 1))
        w[0, 0] = 1.0
        p = ConvNetParams([], w, np.zeros(4))
        x = rng.random((1, 2, 3, 3))
        out = conv_forward(p, SparseVolume(x))
        np.testing.assert_allclose(out[0], x[0])
        np.testing.assert_array_equal(out[1:], 0.0)

    def test_shape_contract(self, rng):
        p = init_params(16, hidden=8, num_blocks=5, seed=2)
        out = conv_forward(p, SparseVolume(rng.standard_normal((16, 5, 4, 4))))
        assert out.shape == (4, 5, 4, 4)
        assert np.isfinite(out).all()

    def test_channel_mismatch_rejected(self, rng):
        p = tiny_params(cin=6)
        with pytest.raises(ParameterError):
            conv_forward(p, SparseVolume(rng.random((5, 2, 2, 2))))

    def test_alpha_channel_bounded(self, rng):
        p = tiny_params()
        out = conv_forward(p, SparseVolume(10 * rng.standard_normal((6, 3, 4, 4))))
        assert np.abs(out[3]).max() <= 4.0

    def test_translation_equivariance_interior(self, rng):
        p = tiny_params(cin=2, hidden=3, blocks=2)
        x = rng.random((2, 3, 8, 8))
        shifted = np.roll(x, 2, axis=3)
        y = conv_forward(p, SparseVolume(x))
        ys = conv_forward(p, SparseVolume(shifted))
        pad = 2 + 2  # one pixel of padding influence per conv layer
        np.testing.assert_allclose(
            np.roll(y, 2, axis=3)[:, :, :, pad:-pad], ys[:, :, :, pad:-pad], atol=1e-12
        )


class TestConvBackward:
    def test_zero_upstream_zero_grads(self, rng):
        p = tiny_params()
        x = rng.random((6, 2, 3, 3))
        grads, dx = conv_backward(p, SparseVolume(x), np.zeros((4, 2, 3, 3)))
        assert all(np.all(a == 0) for a in grads.arrays())
        np.testing.assert_array_equal(dx, 0.0)

    def test_scalar_net_hand_chain_rule(self):
        # single 1x1x1 weight w: out0 = w * x, d/dw = sum(up0 * x), dx = w * up0
        w = np.zeros((4, 1, 1, 1, 1))
        w[0, 0] = 2.0
        p = ConvNetParams([], w, np.zeros(4))
        x = np.full((1, 1, 1, 1), 3.0)
        up = np.zeros((4, 1, 1, 1))
        up[0] = 1.5
        grads, dx = conv_backward(p, SparseVolume(x), up)
        assert grads.final_weight[0, 0, 0, 0, 0] == pytest.approx(4.5)
        assert dx[0, 0, 0, 0] == pytest.approx(3.0)

    @pytest.mark.parametrize("blocks,hidden,shape", [(1, 2, (3, 2, 3, 3)), (2, 4, (5, 3, 4, 4))])
    def test_matches_finite_differences(self, rng, blocks, hidden, shape):
        p = init_params(shape[0], hidden=hidden, num_blocks=blocks, seed=7)
        for b in p.blocks:
            b.shift[:] = 0.05  # keep pre-activations off the rectifier kink
        x = rng.standard_normal(shape)
        up = rng.standard_normal((4,) + shape[1:])
        grads, dx = conv_backward(p, SparseVolume(x), up)

        def loss(params):
            return np.sum(up * conv_forward(params, SparseVolume(x)))

        eps = 1e-6
        for arr, g in zip(p.arrays(), grads.arrays()):
            flat = arr.ravel()
            idxs = np.random.default_rng(0).choice(flat.size, size=min(8, flat.size), replace=False)
            for i in idxs:
                orig = flat[i]
                flat[i] = orig + eps
                up_val = loss(p)
                flat[i] = orig - eps
                dn_val = loss(p)
                flat[i] = orig
                fd = (up_val - dn_val) / (2 * eps)
                ref = max(abs(fd), abs(g.ravel()[i]), 1e-6)
                assert abs(g.ravel()[i] - fd) / ref < 1e-3
        # input gradient
        flat = x.ravel()
        for i in np.random.default_rng(1).choice(flat.size, size=8, replace=False):
            orig = flat[i]
            flat[i] = orig + eps
            up_val = np.sum(up * conv_forward(p, SparseVolume(x)))
            flat[i] = orig - eps
            dn_val = np.sum(up * conv_forward(p, SparseVolume(x)))
            flat[i] = orig
            fd = (up_val - dn_val) / (2 * eps)
            ref = max(abs(fd), abs(dx.ravel()[i]), 1e-6)
            assert abs(dx.ravel()[i] - fd) / ref < 1e-3


class TestAnalyticUpdate:
    def _scene(self, rng, d=3, h=6, w=6):
        cam = simple_camera(h, w)
        m = random_mpi(rng, d=d, h=h, w=w, cam=cam)
        cams = [simple_camera(h, w, t=(0.03 * (i - 1), 0, 0)) for i in range(3)]
        views = [(render_novel_view(m, c), c) for c in cams]
        return m, views

    def test_zero_at_optimum(self, rng):
        m, views = self._scene(rng)
        s = SparseIndices(topk_indices(alpha_gradients(m)[..., 0], 2), m.num_planes)
        res = analytic_update(None, s, m, views, step=0.1)
        assert np.abs(res).max() < 1e-8

    def test_single_plane_closed_form(self, rng):
        h = w = 5
        cam = simple_camera(h, w)
        m = make_mpi(rng.uniform(0.2, 0.8, (1, h, w, 3)), np.ones((1, h, w, 1)), cam=cam)
        gt = rng.uniform(0.2, 0.8, (h, w, 3))
        s = SparseIndices(np.zeros((1, h, w), int), 1)
        lam = 0.5
        res = analytic_update(None, s, m, [(gt, cam)], step=lam, alpha_rule="linear")
        expect = -lam * (2.0 / gt.size) * (over_composite(m) - gt)
        np.testing.assert_allclose(np.moveaxis(res[:3, 0], 0, -1), expect, atol=1e-12)

    def test_descent_direction(self, rng):
        m, views = self._scene(rng)
        # perturb away from the optimum
        m2 = m.replace(color=np.clip(m.color + rng.normal(0, 0.1, m.color.shape), 0, 1))
        s = SparseIndices(
            np.broadcast_to(np.arange(m.num_planes)[:, None, None], m2.alpha.shape[:3]).copy(),
            m.num_planes,
        )

        def loss(mm):
            return sum(np.mean((render_novel_view(mm, c) - img) ** 2) for img, c in views)

        before = loss(m2)
        res = analytic_update(None, s, m2, views, step=1e-2)
        after = loss(restore_and_update(m2, res, s))
        assert after <= before


class TestInitMpi:
    def _psv(self, rng, n=3, d=4, h=6, w=8):
        cam = simple_camera(h, w)
        cams = [simple_camera(h, w, t=(0.05 * i, 0, 0)) for i in range(n)]
        imgs = [smooth_image(rng, h, w) for _ in range(n)]
        return build_psv(imgs, cam, cams, np.linspace(4.0, 1.0, d))

    def test_heuristic_single_view_uniform_alpha(self, rng):
        cam = simple_camera(4, 4)
        img = rng.random((4, 4, 3))
        p = build_psv([img], cam, [cam], [2.0, 1.0])
        m = init_mpi_heuristic(p)
        np.testing.assert_allclose(m.color[0], img, atol=1e-12)
        # zero variance everywhere -> alpha constant across depth
        assert np.ptp(m.alpha, axis=0).max() < 1e-9

    def test_heuristic_black_input(self):
        cam = simple_camera(4, 4)
        p = build_psv([np.zeros((4, 4, 3))] * 2, cam, [cam, cam], [2.0, 1.0])
        m = init_mpi_heuristic(p)
        np.testing.assert_array_equal(m.color, 0.0)

    def test_heuristic_photoconsistency_peak(self, rng):
        # content on one plane: alpha should peak at the consistent depth
        from lfield.mpi_core import Mpi

        h, w, d = 16, 20, 4
        cam = simple_camera(h, w)
        depths = np.linspace(4.0, 1.0, d)
        color = np.zeros((d, h, w, 3))
        alpha = np.zeros((d, h, w, 1))
        color[1] = smooth_image(rng, h, w)
        alpha[1] = 1.0
        gt = Mpi(color, alpha, depths, cam)
        cams = [simple_camera(h, w, t=(0.15 * (i - 1), 0, 0)) for i in range(3)]
        imgs = [render_novel_view(gt, c) for c in cams]
        p = build_psv(imgs, cam, cams, depths)
        m = init_mpi_heuristic(p)
        interior = m.alpha[:, 4:-4, 4:-4, 0]
        peak = np.argmax(interior.mean(axis=(1, 2)))
        assert peak == 1

    def test_network_zero_weights_is_half(self, rng):
        p = self._psv(rng)
        params = init_params(9, hidden=4, num_blocks=2, seed=0)
        for b in params.blocks:
            b.weight[:] = 0
            b.shift[:] = 0
        params.final_weight[:] = 0
        m = init_mpi_network(params, p)
        np.testing.assert_allclose(m.color, 0.5)
        np.testing.assert_allclose(m.alpha, 0.5)

    def test_network_shape_contract(self, rng):
        p = self._psv(rng, n=3, d=4, h=6, w=8)
        params = init_params(9, hidden=4, num_blocks=2, seed=0)
        m = init_mpi_network(params, p)
        assert m.color.shape == (4, 6, 8, 3)
        assert m.alpha.shape == (4, 6, 8, 1)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, rng):
        nets = [init_params(6, hidden=3, num_blocks=2, seed=3), init_params(8, hidden=4, num_blocks=1, seed=4)]
        path = tmp_path / "params.bin"
        save_checkpoint(path, nets)
        loaded = load_checkpoint(path)
        assert len(loaded) == 2
        for a, b in zip(nets[0].arrays(), loaded[0].arrays()):
            np.testing.assert_array_equal(a.astype(np.float32), b.astype(np.float32))
        # double round trip is byte-identical
        path2 = tmp_path / "params2.bin"
        save_checkpoint(path2, loaded)
        assert path.read_bytes() == path2.read_bytes()

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPExxxx")
        with pytest.raises(ParameterError):
            load_checkpoint(path)

    def test_rejects_unknown_version(self, tmp_path):
        import struct

        path = tmp_path / "v9.bin"
        path.write_bytes(b"LFNW" + struct.pack("<II", 9, 0))
        with pytest.raises(ParameterError):
            load_checkpoint(path)
