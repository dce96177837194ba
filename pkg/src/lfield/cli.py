"""Command-line surface: scene synthesis, MPI reconstruction, rendering,
evaluation, benchmarking, the k-sweep, training, and the viewer export.

Exit codes: 0 success, 1 validation error, 2 numeric failure.
"""

import argparse
import csv
import io
import json
import os
import shutil
import sys
import time

import numpy as np

from .cli_io import (
    configure_logging,
    load_config,
    load_mpi,
    load_pose,
    load_scene,
    log,
    save_image,
    save_mpi,
    save_scene,
    write_viewer_manifest,
)
from .geometry import NumericError, ParameterError, depth_planes
from .hsgd import HsgdConfig, LearnedOperators, run
from .metrics import color_recovery_ratio, psnr, ssim
from .mpi_core import render_novel_view
from .scenegen import make_scene
from .training import (
    LossWeights,
    TrainConfig,
    TrainingScene,
    train,
    write_trace_csv,
)
from .update_ops import load_checkpoint, save_checkpoint


def _write_csv(path, header, rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    writer.writerows(rows)
    if path is None:
        sys.stdout.write(buf.getvalue())
    else:
        from .cli_io import atomic_write_text

        atomic_write_text(path, buf.getvalue())


def _operators_from_checkpoint(path) -> LearnedOperators:
    nets = load_checkpoint(path)
    if len(nets) < 2:
        raise ParameterError(f"{path}: expected an initializer plus update operators")
    return LearnedOperators(nets[0], tuple(nets[1:]))


def cmd_synth(args):
    scene = make_scene(
        args.seed,
        args.planes,
        args.height,
        args.width,
        baseline=args.baseline,
        num_sources=args.sources,
        near=args.near,
        far=args.far,
    )
    images = [scene.reference_image, *scene.source_images, *scene.target_images]
    cameras = [scene.rig.reference, *scene.rig.sources, *scene.rig.targets]
    roles = ["reference"] + ["source"] * len(scene.source_images) + ["target"] * len(
        scene.target_images
    )
    save_scene(args.out, images, cameras, roles, args.near, args.far)
    if args.save_mpi:
        save_mpi(os.path.join(args.out, "ground_truth_mpi"), scene.mpi)
    return 0


def _hsgd_config(args) -> HsgdConfig:
    return HsgdConfig(
        planes=args.planes,
        levels=args.iters,
        k=args.k,
        sparsifier=args.sparsifier,
        update=args.update,
        step=args.step,
        steps_per_level=args.steps_per_level,
        near=args.near,
        far=args.far,
        seed=args.seed,
    )


def cmd_build(args):
    scene = load_scene(args.scene)
    args.near = scene.near if args.near is None else args.near
    args.far = scene.far if args.far is None else args.far
    cfg = _hsgd_config(args)
    operators = None
    if cfg.update == "learned":
        if args.params is None:
            raise ParameterError("--update learned requires --params CHECKPOINT")
        operators = _operators_from_checkpoint(args.params)
    images, cameras = scene.build_views()
    mpi, trace = run(images, cameras, scene.reference[1], cfg, operators=operators)
    os.makedirs(args.out, exist_ok=True)
    save_mpi(args.out, mpi)
    # timings stay out of the trace so identical runs yield identical bytes
    _write_csv(
        os.path.join(args.out, "trace.csv"),
        ["level", "step", "render_loss"],
        [[r.level, r.step, repr(r.render_loss)] for r in trace],
    )
    log.info("build finished; final render loss %.6g", trace[-1].render_loss)
    return 0


def cmd_render(args):
    mpi = load_mpi(args.mpi)
    cam = load_pose(args.pose)
    image = render_novel_view(mpi, cam)
    save_image(args.out, np.clip(image, 0.0, 1.0))
    return 0


def cmd_eval(args):
    scene = load_scene(args.scene)
    mpi = load_mpi(args.mpi)
    rows = []
    for i, (img, cam, role) in enumerate(zip(scene.images, scene.cameras, scene.roles)):
        render = np.clip(render_novel_view(mpi, cam), 0.0, 1.0)
        rows.append([i, role, repr(psnr(render, img)), repr(ssim(render, img))])
    _write_csv(args.out, ["view", "role", "psnr", "ssim"], rows)
    return 0


def update_stage_seconds(residual, indices, color, alpha, eps=1e-4):
    """One in-place sparse update at fixed indices, timed.

    Covers the k-proportional work only: slab gather of the residual and
    the current RGBA values, the logit-space alpha update, and the scatter
    back. Index selection and gradient formulation are per-iteration costs
    shared by every k and are benchmarked separately.
    """
    idx_c = np.broadcast_to(indices[..., None], indices.shape + (3,))
    idx_a = indices[..., None]
    t0 = time.perf_counter()
    res_c = np.take_along_axis(residual[:3], indices[None], axis=1)
    res_a = np.take_along_axis(residual[3:], indices[None], axis=1)
    cur_c = np.take_along_axis(color, idx_c, axis=0)
    cur_a = np.take_along_axis(alpha, idx_a, axis=0)
    new_c = np.clip(cur_c + np.moveaxis(res_c, 0, -1), 0.0, 1.0)
    a_safe = np.clip(cur_a, eps, 1.0 - eps)
    z = np.log(a_safe) - np.log1p(-a_safe) + res_a[0][..., None]
    new_a = 1.0 / (1.0 + np.exp(-z))
    np.put_along_axis(color, idx_c, new_c, axis=0)
    np.put_along_axis(alpha, idx_a, new_a, axis=0)
    return time.perf_counter() - t0


def bench_update_stage(d, h, w, k, repeat, seed=0, dense=False):
    """Timing rows for the sparse update stage on a random float32 volume."""
    rng = np.random.default_rng(seed)
    residual = (rng.standard_normal((4, d, h, w)) * 0.01).astype(np.float32)
    gate = rng.random((d, h, w)).astype(np.float32)
    color = rng.random((d, h, w, 3)).astype(np.float32)
    alpha = (rng.random((d, h, w, 1)) * 0.9 + 0.05).astype(np.float32)
    if dense:
        k = d
        indices = np.broadcast_to(np.arange(d)[:, None, None], (d, h, w)).copy()
    else:
        from .sparsify import topk_indices

        indices = topk_indices(gate, k)
    mode = "dense" if dense else "sparse"
    rows = []
    for r in range(repeat):
        seconds = update_stage_seconds(residual, indices, color, alpha)
        rows.append([mode, k, r, repr(seconds), repr(1.0 / seconds)])
    return rows


def cmd_bench(args):
    d, h, w = args.planes, args.height, args.width
    rows = []
    if args.dense or not args.sparse:
        rows += bench_update_stage(d, h, w, d, args.repeat, seed=args.seed, dense=True)
    if args.sparse or not args.dense:
        rows += bench_update_stage(d, h, w, args.k, args.repeat, seed=args.seed)
    _write_csv(args.out, ["mode", "k", "repeat", "update_seconds", "updates_per_second"], rows)
    return 0


def cmd_sweep_k(args):
    scene = load_scene(args.scene)
    if args.mpi:
        mpi = load_mpi(args.mpi)
    else:
        images, cameras = scene.build_views()
        cfg = HsgdConfig(
            planes=args.planes,
            levels=args.iters,
            k=args.planes,
            sparsifier="dense",
            step=args.step,
            steps_per_level=args.steps_per_level,
            near=scene.near,
            far=scene.far,
        )
        mpi, _ = run(images, cameras, scene.reference[1], cfg)
    ks = [int(x) for x in args.ks.split(",")]
    rows = []
    for k in ks:
        stats = color_recovery_ratio(mpi, k)
        rows.append(
            [k, repr(stats["mean_ratio"]), repr(stats["median_ratio"]), repr(stats["psnr_vs_full"])]
        )
    _write_csv(args.out, ["k", "mean_ratio", "median_ratio", "psnr_vs_full"], rows)
    return 0


def _train_config(conf: dict) -> TrainConfig:
    def get(key, default, cast):
        return cast(conf[key]) if key in conf else default

    weights = LossWeights(
        iteration=tuple(
            float(x) for x in get("iteration_weights", "0.2,0.3,0.5", str).split(",")
        ),
        source=get("source_weight", 0.5, float),
        sparsity=get("sparsity_weight", 0.2, float),
    )
    return TrainConfig(
        epochs=get("epochs", 100, int),
        lr=get("lr", 1e-3, float),
        seed=get("seed", 0, int),
        levels=get("levels", len(weights.iteration), int),
        k=get("k", 4, int),
        sparsifier=get("sparsifier", "topk", str),
        alpha_rule=get("alpha_rule", "logit", str),
        hidden=get("hidden", 8, int),
        blocks=get("blocks", 2, int),
        weights=weights,
        plateau_patience=get("plateau_patience", 10, int),
        checkpoint_every=get("checkpoint_every", 0, int),
        checkpoint_path=conf.get("checkpoint_path"),
    )


def _train_scenes(conf: dict):
    scenes = []
    if "scenes" in conf:
        planes = int(conf.get("planes", 8))
        for path in conf["scenes"].split(","):
            data = load_scene(path.strip())
            depths = depth_planes(
                HsgdConfig(planes=planes, near=data.near, far=data.far).depth_sampling()
            )
            ref_img, ref_cam = data.reference
            scenes.append(
                TrainingScene(
                    ref_img,
                    ref_cam,
                    tuple(img for img, _ in data.sources),
                    tuple(cam for _, cam in data.sources),
                    depths,
                )
            )
    if "scene_seeds" in conf:
        for seed in conf["scene_seeds"].split(","):
            scenes.append(
                TrainingScene.from_synthetic(
                    make_scene(
                        int(seed),
                        int(conf.get("scene_planes", 6)),
                        int(conf.get("scene_height", 16)),
                        int(conf.get("scene_width", 20)),
                        baseline=float(conf.get("scene_baseline", 0.08)),
                        num_sources=int(conf.get("scene_sources", 3)),
                        near=float(conf.get("near", 2.0)),
                        far=float(conf.get("far", 8.0)),
                    )
                )
            )
    if not scenes:
        raise ParameterError("config must list scenes= paths or scene_seeds= integers")
    return scenes


def cmd_train(args):
    conf = load_config(args.config)
    cfg = _train_config(conf)
    scenes = _train_scenes(conf)
    ops, trace = train(scenes, cfg)
    os.makedirs(args.out, exist_ok=True)
    save_checkpoint(os.path.join(args.out, "operators.ckpt"), [ops.initializer, *ops.updates])
    write_trace_csv(os.path.join(args.out, "trace.csv"), trace)
    if trace:
        log.info("training finished; total loss %.6g", trace[-1]["total"])
    return 0


def cmd_export_viewer(args):
    mpi = load_mpi(args.mpi)
    os.makedirs(args.out, exist_ok=True)
    save_mpi(args.out, mpi)
    write_viewer_manifest(os.path.join(args.out, "manifest.json"), mpi)
    if args.assets:
        if not os.path.isdir(args.assets):
            raise ParameterError(f"{args.assets}: viewer asset directory not found")
        for name in sorted(os.listdir(args.assets)):
            src = os.path.join(args.assets, name)
            dst = os.path.join(args.out, name)
            if os.path.isdir(src):
                shutil.copytree(src, dst, dirs_exist_ok=True)
            else:
                shutil.copy2(src, dst)
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="lfield", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene bundle")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--planes", type=int, default=8)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--sources", type=int, default=3)
    p.add_argument("--baseline", type=float, default=0.08)
    p.add_argument("--near", type=float, default=2.0)
    p.add_argument("--far", type=float, default=8.0)
    p.add_argument("--save-mpi", action="store_true", help="also write the ground-truth MPI")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("build", help="reconstruct an MPI from a scene bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--planes", type=int, default=40)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--update", choices=["analytic", "learned"], default="analytic")
    p.add_argument("--sparsifier", choices=["topk", "mvs-window", "dense"], default="topk")
    p.add_argument("--params", help="checkpoint file for --update learned")
    p.add_argument("--step", type=float, default=100.0)
    p.add_argument("--steps-per-level", type=int, default=1)
    p.add_argument("--near", type=float, default=None, help="defaults to the scene bounds")
    p.add_argument("--far", type=float, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("render", help="render an MPI bundle at a pose")
    p.add_argument("--mpi", required=True)
    p.add_argument("--pose", required=True, help="JSON camera file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM of an MPI against a scene bundle")
    p.add_argument("--scene", required=True)
    p.add_argument("--mpi", required=True)
    p.add_argument("--out", default=None, help="CSV path (stdout if omitted)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time the sparse update stage")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--dense", action="store_true")
    group.add_argument("--sparse", action="store_true")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--planes", type=int, default=40)
    p.add_argument("--height", type=int, default=378)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep-k", help="color-recovery ratio across k values")
    p.add_argument("--scene", required=True)
    p.add_argument("--ks", required=True, help="comma-separated k values")
    p.add_argument("--mpi", default=None, help="reuse an existing MPI bundle")
    p.add_argument("--planes", type=int, default=40)
    p.add_argument("--iters", type=int, default=3)
    p.add_argument("--step", type=float, default=100.0)
    p.add_argument("--steps-per-level", type=int, default=1)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep_k)

    p = sub.add_parser("train", help="train the learned operators")
    p.add_argument("--config", required=True, help="flat key=value config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export-viewer", help="MPI bundle + manifest for the browser viewer")
    p.add_argument("--mpi", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--assets", default=None, help="static viewer asset directory to copy")
    p.set_defaults(func=cmd_export_viewer)
    return parser


def main(argv=None) -> int:
    configure_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ParameterError, OSError, json.JSONDecodeError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
