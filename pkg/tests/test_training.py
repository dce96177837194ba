import numpy as np
import pytest

from lfield.geometry import ParameterError
from lfield.scenegen import make_scene
from lfield.training import (
    LossWeights,
    PlateauSchedule,
    TrainConfig,
    adam_step,
    flatten_operators,
    init_optimizer,
    make_operators,
    prepare_scene,
    render_loss,
    scene_loss_and_grads,
    sparsity_loss,
    total_loss,
    train,
    unflatten_operators,
    write_trace_csv,
)
from tests.test_mpi_core import make_mpi


def tiny_scene(seed=0, d=4, h=6, w=8):
    return make_scene(seed, d, h, w, num_sources=2)


class TestRenderLoss:
    def test_perfect_renders_are_zero(self, rng):
        img = rng.uniform(size=(4, 5, 3))
        renders = [(img, (img, img))]
        w = LossWeights(iteration=(1.0,))
        assert render_loss(renders, renders, w) == 0.0

    def test_single_iteration_identity(self):
        # MSE 0.04 on the reference only, weight 1, mu 0
        a = np.zeros((5, 5, 3))
        b = np.full((5, 5, 3), 0.2)
        w = LossWeights(iteration=(1.0,), source=0.0)
        assert render_loss([(a, ())], [(b, ())], w) == pytest.approx(0.04)

    def test_default_weights_sum(self):
        # reference MSE 0.01 at every iteration, zero source error
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.1)
        src = np.ones((4, 4, 3))
        renders = [(a, (src,))] * 3
        gts = [(b, (src,))] * 3
        assert render_loss(renders, gts, LossWeights()) == pytest.approx(0.01)

    def test_source_weight(self):
        a = np.zeros((4, 4, 3))
        b = np.full((4, 4, 3), 0.1)
        w = LossWeights(iteration=(1.0,), source=0.5)
        assert render_loss([(a, (a,))], [(a, (b,))], w) == pytest.approx(0.005)

    def test_misaligned_inputs(self):
        a = np.zeros((4, 4, 3))
        with pytest.raises(ParameterError):
            render_loss([(a, ())], [(a, ()), (a, ())], LossWeights(iteration=(1.0, 1.0)))

    def test_negative_weight_rejected(self):
        with pytest.raises(ParameterError):
            LossWeights(iteration=(-0.1,))


class TestSparsityLoss:
    def test_binary_alpha_is_zero(self):
        m = make_mpi(np.zeros((2, 3, 3, 3)), np.zeros((2, 3, 3, 1)))
        assert sparsity_loss(m) == pytest.approx(0.0, abs=1e-12)
        m = make_mpi(np.zeros((2, 3, 3, 3)), np.ones((2, 3, 3, 1)))
        assert sparsity_loss(m) == pytest.approx(0.0, abs=1e-12)

    def test_half_alpha_is_log_1p5(self):
        m = make_mpi(np.zeros((2, 3, 3, 3)), np.full((2, 3, 3, 1), 0.5))
        assert sparsity_loss(m) == pytest.approx(np.log(1.5), abs=1e-9)
        assert sparsity_loss(m) == pytest.approx(0.405465, abs=1e-6)

    def test_maximized_at_half(self):
        grid = np.linspace(0.0, 1.0, 21)
        vals = [sparsity_loss(np.full((2, 2), a)) for a in grid]
        assert np.argmax(vals) == 10


class TestTotalLoss:
    def test_perfect_render_binary_alpha(self, rng):
        img = rng.uniform(size=(4, 4, 3))
        m = make_mpi(np.zeros((2, 4, 4, 3)), np.ones((2, 4, 4, 1)))
        w = LossWeights(iteration=(1.0,))
        assert total_loss([(img, ())], [(img, ())], m, w) == pytest.approx(0.0, abs=1e-12)

    def test_zero_sparsity_weight(self, rng):
        a = rng.uniform(size=(4, 4, 3))
        b = rng.uniform(size=(4, 4, 3))
        m = make_mpi(np.zeros((2, 4, 4, 3)), np.full((2, 4, 4, 1), 0.5))
        w = LossWeights(iteration=(1.0,), sparsity=0.0)
        assert total_loss([(a, ())], [(b, ())], m, w) == render_loss([(a, ())], [(b, ())], w)

    def test_matches_hand_computed_sum(self, rng):
        a = rng.uniform(size=(4, 4, 3))
        b = rng.uniform(size=(4, 4, 3))
        alpha = rng.uniform(0.1, 0.9, size=(2, 4, 4, 1))
        m = make_mpi(np.zeros((2, 4, 4, 3)), alpha)
        w = LossWeights(iteration=(0.7,), source=0.5, sparsity=0.2)
        expected = 0.7 * np.mean((a - b) ** 2) + 0.2 * np.mean(
            np.log(1.5 - np.abs(0.5 - alpha))
        )
        assert total_loss([(a, ())], [(b, ())], m, w) == pytest.approx(expected, rel=1e-12)


class TestAdam:
    def test_zero_grads_keep_params(self, rng):
        params = [rng.standard_normal((3, 2)), rng.standard_normal(4)]
        state = init_optimizer(params, 1e-3)
        new_state, new_params = adam_step(state, params, [np.zeros_like(p) for p in params])
        assert new_state.step == 1
        for p, q in zip(params, new_params):
            np.testing.assert_array_equal(p, q)

    def test_first_step_magnitude(self):
        # bias correction makes the first step ~ lr * sign(g)
        params = [np.array([1.0])]
        state = init_optimizer(params, 1e-3)
        _, new_params = adam_step(state, params, [np.array([1.0])])
        assert new_params[0][0] == pytest.approx(1.0 - 1e-3, abs=1e-8)

    def test_deterministic(self, rng):
        params = [rng.standard_normal((2, 2))]
        grads = [rng.standard_normal((2, 2))]
        s1, p1 = adam_step(init_optimizer(params, 1e-2), params, grads)
        s2, p2 = adam_step(init_optimizer(params, 1e-2), params, grads)
        np.testing.assert_array_equal(p1[0], p2[0])
        np.testing.assert_array_equal(s1.first[0], s2.first[0])


class TestPlateauSchedule:
    def test_halves_after_patience(self):
        sched = PlateauSchedule(patience=10)
        lr = 1e-3
        lr = sched.update(1.0, lr)  # establishes the best
        for _ in range(9):
            lr = sched.update(1.0, lr)
        assert lr == 1e-3
        lr = sched.update(1.0, lr)
        assert lr == 5e-4

    def test_improvement_resets_the_counter(self):
        sched = PlateauSchedule(patience=3)
        lr = 1.0
        for loss in (1.0, 1.0, 1.0, 0.5, 0.5, 0.5):
            lr = sched.update(loss, lr)
        assert lr == 1.0
        for _ in range(2):
            lr = sched.update(0.5, lr)
        assert lr == 0.5


class TestOperatorFlattening:
    def test_round_trip(self):
        cfg = TrainConfig(levels=2, weights=LossWeights(iteration=(0.4, 0.6)))
        ops = make_operators(3, cfg)
        flat = flatten_operators(ops)
        back = unflatten_operators(flat, ops)
        for a, b in zip(flat, flatten_operators(back)):
            np.testing.assert_array_equal(a, b)


class TestEndToEndGradients:
    def test_parameter_gradients_match_finite_differences(self):
        scene = tiny_scene()
        cfg = TrainConfig(
            levels=1, k=2, hidden=4, blocks=1, weights=LossWeights(iteration=(1.0,)), seed=3
        )
        prep = prepare_scene(scene, cfg.levels)
        ops = make_operators(3, cfg)
        _, _, grads = scene_loss_and_grads(ops, prep, cfg)
        flat = flatten_operators(ops)

        def loss_at(arrays):
            r, s, _ = scene_loss_and_grads(unflatten_operators(arrays, ops), prep, cfg)
            return r + cfg.weights.sparsity * s

        eps = 1e-6
        rng = np.random.default_rng(0)
        checked = 0
        for ai, (arr, g) in enumerate(zip(flat, grads)):
            for i in rng.choice(arr.size, size=min(4, arr.size), replace=False):
                pert = [a.copy() for a in flat]
                pert[ai].ravel()[i] = arr.ravel()[i] + eps
                up = loss_at(pert)
                pert[ai].ravel()[i] = arr.ravel()[i] - eps
                dn = loss_at(pert)
                fd = (up - dn) / (2 * eps)
                ref = max(abs(fd), abs(g.ravel()[i]), 1e-8)
                assert abs(g.ravel()[i] - fd) / ref < 5e-3, f"array {ai} index {i}"
                checked += 1
        assert checked >= 20


class TestTrain:
    def test_zero_epochs_keep_params(self):
        scene = tiny_scene()
        cfg = TrainConfig(epochs=0, levels=1, weights=LossWeights(iteration=(1.0,)))
        ops_before = make_operators(3, cfg)
        ops, trace = train([scene], cfg, operators=ops_before)
        assert trace == []
        for a, b in zip(flatten_operators(ops_before), flatten_operators(ops)):
            np.testing.assert_array_equal(a, b)

    def test_fixed_seed_traces_identical(self):
        scene = tiny_scene()
        cfg = TrainConfig(
            epochs=3, levels=1, k=2, hidden=4, blocks=1, weights=LossWeights(iteration=(1.0,))
        )
        _, t1 = train([scene], cfg)
        _, t2 = train([scene], cfg)
        assert t1 == t2

    def test_loss_decreases_on_tiny_scene(self):
        scene = tiny_scene()
        cfg = TrainConfig(
            epochs=20, levels=1, k=2, hidden=4, blocks=1, weights=LossWeights(iteration=(1.0,))
        )
        _, trace = train([scene], cfg)
        assert trace[-1]["total"] < trace[0]["total"]

    def test_weights_must_match_levels(self):
        with pytest.raises(ParameterError):
            TrainConfig(levels=2, weights=LossWeights(iteration=(1.0,)))

    def test_trace_csv_round_trip(self, tmp_path):
        scene = tiny_scene()
        cfg = TrainConfig(
            epochs=2, levels=1, k=2, hidden=4, blocks=1, weights=LossWeights(iteration=(1.0,))
        )
        _, trace = train([scene], cfg)
        path = tmp_path / "trace.csv"
        write_trace_csv(path, trace)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "epoch,render_loss,sparsity_loss,total"
        assert len(lines) == 3
        row = lines[1].split(",")
        assert float(row[1]) == trace[0]["render_loss"]
