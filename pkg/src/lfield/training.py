"""Losses, optimizer, and the training loop for the learned initializer
and update operators.

The whole refinement unroll is differentiated by hand: restore/update,
the slab operator, the gradient-volume formulation (through both warps and
the compositing weights), bilinear upsampling, and the initializer. The
per-pixel depth selection is treated as constant during the backward pass
(straight-through indices), so within a fixed selection the gradients are
exact.
"""

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import NumericError, ParameterError
from .hsgd import LearnedOperators, select_slab, upsample_mpi, upsample_mpi_vjp
from .mpi_core import Mpi, alpha_gradients, render_loss_gradients, render_novel_view
from .psv import box_downsample, build_psv, build_pyramid
from .sparsify import (
    formulate_gradients,
    formulate_gradients_vjp,
    restore_and_update,
    restore_and_update_vjp,
    scatter_add_planes,
)
from .update_ops import (
    ConvNetParams,
    conv_backward,
    conv_forward,
    init_mpi_network,
    init_mpi_network_vjp,
    init_params,
    save_checkpoint,
)


@dataclass(frozen=True)
class LossWeights:
    """Per-iteration render weights, the source-view weight, and the
    sparsity weight."""

    iteration: tuple = (0.2, 0.3, 0.5)
    source: float = 0.5
    sparsity: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "iteration", tuple(float(x) for x in self.iteration))
        if any(x < 0 for x in self.iteration) or self.source < 0 or self.sparsity < 0:
            raise ParameterError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    levels: int = 1
    k: int = 4
    sparsifier: str = "topk"
    alpha_rule: str = "logit"
    hidden: int = 8
    blocks: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    plateau_patience: int = 10
    checkpoint_every: int = 0
    checkpoint_path: str = None

    def __post_init__(self):
        if self.epochs < 0 or self.lr <= 0 or self.levels < 1 or self.k < 1:
            raise ParameterError("invalid training configuration")
        if len(self.weights.iteration) != self.levels:
            raise ParameterError(
                f"need one iteration weight per refinement pass "
                f"({self.levels}), got {len(self.weights.iteration)}"
            )


def _mse(a, b):
    return float(np.mean((a - b) ** 2))


def render_loss(renders, gts, w: LossWeights) -> float:
    """Weighted photometric loss over iterations and views.

    `renders` and `gts` list, per iteration, a `(reference_image,
    source_images)` pair; per-iteration terms are weighted by
    `w.iteration`, source views additionally by `w.source`.
    """
    if len(renders) != len(gts) or len(renders) != len(w.iteration):
        raise ParameterError("renders, ground truths, and weights must align per iteration")
    total = 0.0
    for lam, (r_ref, r_srcs), (g_ref, g_srcs) in zip(w.iteration, renders, gts):
        if len(r_srcs) != len(g_srcs):
            raise ParameterError("source render and ground-truth counts differ")
        term = _mse(r_ref, g_ref)
        term += w.source * sum(_mse(r, g) for r, g in zip(r_srcs, g_srcs))
        total += lam * term
    return total


def sparsity_loss(m) -> float:
    """mean log(1.5 - |0.5 - alpha|): zero at binary alpha, maximal at 0.5."""
    alpha = m.alpha if isinstance(m, Mpi) else np.asarray(m)
    return float(np.mean(np.log(1.5 - np.abs(0.5 - alpha))))


def sparsity_loss_grad(alpha: np.ndarray) -> np.ndarray:
    dev = alpha - 0.5
    return -np.sign(dev) / ((1.5 - np.abs(dev)) * alpha.size)


def total_loss(renders, gts, m, w: LossWeights) -> float:
    return render_loss(renders, gts, w) + w.sparsity * sparsity_loss(m)


# --- optimizer ---------------------------------------------------------------


@dataclass(frozen=True)
class OptimizerState:
    first: tuple
    second: tuple
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.step < 0 or self.lr <= 0:
            raise ParameterError("optimizer state needs step >= 0 and lr > 0")
        for m in list(self.first) + list(self.second):
            if not np.isfinite(m).all():
                raise NumericError("non-finite optimizer moments")


def init_optimizer(params, lr: float) -> OptimizerState:
    return OptimizerState(
        tuple(np.zeros_like(p) for p in params),
        tuple(np.zeros_like(p) for p in params),
        0,
        lr,
    )


def adam_step(state: OptimizerState, params, grads):
    """One bias-corrected Adam update; returns (new_state, new_params)."""
    if len(params) != len(state.first) or len(grads) != len(params):
        raise ParameterError("parameter, gradient, and state lengths differ")
    t = state.step + 1
    new_first, new_second, new_params = [], [], []
    for p, g, m1, m2 in zip(params, grads, state.first, state.second):
        m1 = state.beta1 * m1 + (1 - state.beta1) * g
        m2 = state.beta2 * m2 + (1 - state.beta2) * g * g
        m1_hat = m1 / (1 - state.beta1**t)
        m2_hat = m2 / (1 - state.beta2**t)
        new_params.append(p - state.lr * m1_hat / (np.sqrt(m2_hat) + state.eps))
        new_first.append(m1)
        new_second.append(m2)
    new_state = replace(state, first=tuple(new_first), second=tuple(new_second), step=t)
    return new_state, new_params


@dataclass
class PlateauSchedule:
    """Halves the learning rate after `patience` consecutive epochs without
    improvement of the tracked loss."""

    patience: int
    best: float = np.inf
    stall: int = 0

    def update(self, loss: float, lr: float) -> float:
        if loss < self.best - 1e-12:
            self.best = loss
            self.stall = 0
            return lr
        self.stall += 1
        if self.stall >= self.patience:
            self.stall = 0
            return lr / 2.0
        return lr


# --- parameter flattening ----------------------------------------------------


def make_operators(num_views: int, cfg: TrainConfig) -> LearnedOperators:
    """Freshly initialized networks: a PSV initializer plus one update
    operator per refinement pass."""
    initializer = init_params(3 * num_views, cfg.hidden, cfg.blocks, seed=cfg.seed)
    updates = tuple(
        init_params(4 * num_views + 4, cfg.hidden, cfg.blocks, seed=cfg.seed + 1 + i)
        for i in range(cfg.levels)
    )
    return LearnedOperators(initializer, updates)


def _nets(ops: LearnedOperators):
    return [ops.initializer, *ops.updates]


def flatten_operators(ops: LearnedOperators):
    return [a for net in _nets(ops) for a in net.arrays()]


def unflatten_operators(arrays, template: LearnedOperators) -> LearnedOperators:
    nets = []
    pos = 0
    for net in _nets(template):
        n = len(net.arrays())
        nets.append(ConvNetParams.from_arrays(list(arrays[pos : pos + n])))
        pos += n
    if pos != len(arrays):
        raise ParameterError("parameter list does not match the operator layout")
    return LearnedOperators(nets[0], tuple(nets[1:]))


# --- scene preparation and the differentiable unroll -------------------------


@dataclass(frozen=True)
class TrainingScene:
    """The inputs training actually needs from a scene: a posed reference
    view, posed source views, and the depth-plane positions."""

    reference_image: np.ndarray
    reference_camera: object
    source_images: tuple
    source_cameras: tuple
    depths: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "source_images", tuple(self.source_images))
        object.__setattr__(self, "source_cameras", tuple(self.source_cameras))
        if len(self.source_images) != len(self.source_cameras) or not self.source_images:
            raise ParameterError("need source images with matching cameras")

    @staticmethod
    def from_synthetic(scene):
        return TrainingScene(
            scene.reference_image,
            scene.rig.reference,
            scene.source_images,
            scene.rig.sources,
            scene.mpi.depths,
        )


def _as_training_scene(scene):
    return scene if isinstance(scene, TrainingScene) else TrainingScene.from_synthetic(scene)


def prepare_scene(scene, levels: int):
    """Fixed per-scene inputs: the PSV pyramid built from every posed view
    (reference first, matching the reconstruction command) and, per level,
    the downsampled ground-truth images for the loss."""
    scene = _as_training_scene(scene)
    srcs = [scene.reference_image, *scene.source_images]
    cams = [scene.reference_camera, *scene.source_cameras]
    psv = build_psv(srcs, scene.reference_camera, cams, scene.depths)
    pyramid = build_pyramid(psv, levels - 1)
    refs = [scene.reference_image]
    sources = [tuple(scene.source_images)]
    for _ in range(levels - 1):
        refs.append(box_downsample(refs[-1]))
        sources.append(tuple(box_downsample(s) for s in sources[-1]))
    loss_views = []
    for level, p in enumerate(pyramid.levels):
        loss_views.append(
            {
                "ref": (refs[level], p.ref_camera),
                # view_cameras[0] is the reference; the mu-weighted source
                # terms use the remaining views
                "sources": tuple(zip(sources[level], p.view_cameras[1:])),
            }
        )
    return {"pyramid": pyramid.levels, "loss_views": loss_views}


def _unroll(ops: LearnedOperators, prep, cfg: TrainConfig):
    """Forward pass with tapes; returns the final MPI, per-pass records,
    and the per-iteration (reference, sources) renders."""
    pyramid = prep["pyramid"]
    coarse = pyramid[-1]
    m, init_tape = init_mpi_network(ops.initializer, coarse, with_tape=True)
    records = []
    renders = []
    for pass_index, level in enumerate(reversed(range(cfg.levels))):
        p = pyramid[level]
        rec = {"level": level, "pass": pass_index, "p": p}
        if m.color.shape[1:3] != p.image_size:
            rec["up_in_size"] = m.color.shape[1:3]
            m = upsample_mpi(m, out_size=p.image_size).replace(ref_camera=p.ref_camera)
        volume, tape_f = formulate_gradients(m, p, with_tape=True)
        gate = alpha_gradients(m)[..., 0]  # selection only; detached in backward
        vs, s = select_slab(volume, gate, cfg.sparsifier, cfg.k)
        res, tape_n = conv_forward(ops.updates[pass_index], vs, with_tape=True)
        m_new, tape_r = restore_and_update(
            m, res, s, alpha_rule=cfg.alpha_rule, with_tape=True
        )
        rec.update(m_in=m, m_out=m_new, vs=vs, s=s, tape_f=tape_f, tape_n=tape_n, tape_r=tape_r)
        records.append(rec)
        m = m_new
        views = prep["loss_views"][level]
        r_ref = render_novel_view(m, views["ref"][1])
        r_srcs = tuple(render_novel_view(m, cam) for _, cam in views["sources"])
        renders.append((r_ref, r_srcs))
    return m, init_tape, records, renders


def _render_seed(m: Mpi, views, lam: float, mu: float):
    """Weighted photometric gradient on one iteration's output MPI."""
    gt_ref, cam_ref = views["ref"]
    dc, da = render_loss_gradients(m, cam_ref, gt_ref)
    d_color = lam * dc
    d_alpha = lam * da
    for gt, cam in views["sources"]:
        dc, da = render_loss_gradients(m, cam, gt)
        d_color += lam * mu * dc
        d_alpha += lam * mu * da
    return d_color, d_alpha


def scene_loss_and_grads(ops: LearnedOperators, prep, cfg: TrainConfig):
    """Total loss for one scene plus exact parameter gradients (selection
    indices held fixed)."""
    w = cfg.weights
    m, init_tape, records, renders = _unroll(ops, prep, cfg)
    gts = [
        (prep["loss_views"][r["level"]]["ref"][0], tuple(g for g, _ in prep["loss_views"][r["level"]]["sources"]))
        for r in records
    ]
    r_loss = render_loss(renders, gts, w)
    s_loss = sparsity_loss(m)

    d_color = np.zeros_like(m.color)
    d_alpha = w.sparsity * sparsity_loss_grad(m.alpha)
    update_grads = [None] * len(records)
    for rec in reversed(records):
        i = rec["pass"]
        views = prep["loss_views"][rec["level"]]
        dc, da = _render_seed(rec["m_out"], views, w.iteration[i], w.source)
        d_color += dc
        d_alpha += da
        d_res, d_color, d_alpha = restore_and_update_vjp(rec["tape_r"], d_color, d_alpha)
        net_grads, d_vs = conv_backward(ops.updates[i], rec["vs"], d_res, rec["tape_n"])
        update_grads[i] = net_grads
        d_volume = scatter_add_planes(rec["m_in"].num_planes, rec["s"].indices, d_vs)
        dc_f, da_f = formulate_gradients_vjp(rec["tape_f"], rec["m_in"], rec["p"], d_volume)
        d_color += dc_f
        d_alpha += da_f
        if "up_in_size" in rec:
            d_color, d_alpha = upsample_mpi_vjp(d_color, d_alpha, rec["up_in_size"])
    init_grads = init_mpi_network_vjp(ops.initializer, init_tape, d_color, d_alpha)
    grads = LearnedOperators(init_grads, tuple(update_grads))
    return r_loss, s_loss, flatten_operators(grads)


# --- training loop -----------------------------------------------------------


def train(scenes, cfg: TrainConfig, operators: LearnedOperators = None):
    """Optimize the initializer and update operators on synthetic scenes.

    Returns (operators, trace); trace rows carry epoch, render_loss,
    sparsity_loss, and total. The learning rate halves whenever the total
    loss fails to improve for `plateau_patience` consecutive epochs.
    """
    scenes = list(scenes)
    if not scenes:
        raise ParameterError("need at least one training scene")
    num_views = len(scenes[0].source_images) + 1  # reference + sources
    if any(len(s.source_images) + 1 != num_views for s in scenes):
        raise ParameterError("all scenes must share the source-view count")
    preps = [prepare_scene(s, cfg.levels) for s in scenes]
    ops = operators if operators is not None else make_operators(num_views, cfg)

    flat = flatten_operators(ops)
    state = init_optimizer(flat, cfg.lr)
    trace = []
    schedule = PlateauSchedule(cfg.plateau_patience)
    for epoch in range(cfg.epochs):
        r_total = 0.0
        s_total = 0.0
        grad_sum = [np.zeros_like(p) for p in flat]
        for prep in preps:
            r_loss, s_loss, grads = scene_loss_and_grads(ops, prep, cfg)
            r_total += r_loss
            s_total += s_loss
            for acc, g in zip(grad_sum, grads):
                acc += g
        n = len(preps)
        r_total /= n
        s_total /= n
        total = r_total + cfg.weights.sparsity * s_total
        if not np.isfinite(total):
            raise NumericError(f"non-finite training loss at epoch {epoch}")
        trace.append(
            {"epoch": epoch, "render_loss": r_total, "sparsity_loss": s_total, "total": total}
        )

        state, flat = adam_step(state, flat, [g / n for g in grad_sum])
        ops = unflatten_operators(flat, ops)

        new_lr = schedule.update(total, state.lr)
        if new_lr != state.lr:
            state = replace(state, lr=new_lr)
        if (
            cfg.checkpoint_path
            and cfg.checkpoint_every > 0
            and (epoch + 1) % cfg.checkpoint_every == 0
        ):
            save_checkpoint(cfg.checkpoint_path, _nets(ops))
    return ops, trace


def write_trace_csv(path, trace):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "render_loss", "sparsity_loss", "total"])
        for row in trace:
            writer.writerow(
                [row["epoch"], repr(row["render_loss"]), repr(row["sparsity_loss"]), repr(row["total"])]
            )
