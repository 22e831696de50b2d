"""Command line surface. One subcommand per pipeline stage:

synth, depthmap, augment, train, render, eval, selftest.

Exit codes: 0 success, 1 validation failure (bad arguments, unreadable or
inconsistent inputs), 2 runtime failure (including failed self-test checks).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np


class _ArgumentParser(argparse.ArgumentParser):
    """argparse exits with 2 on bad usage; the contract here reserves 2 for
    runtime failures, so usage errors exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _ArgumentParser:
    parser = _ArgumentParser(prog="ldrf", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    p = sub.add_parser("synth", help="generate a synthetic dataset with ground truth")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--preset", default="corridor", choices=("corridor", "occluder"))
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--width", type=int, default=160)
    p.add_argument("--height", type=int, default=120)
    p.add_argument("--lidar-noise", type=float, default=0.02, help="range noise std (m)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("depthmap", help="accumulate Lidar and rasterize sparse depth maps")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory for .ldd files")
    p.add_argument("--window", type=int, default=10, help="temporal accumulation window")
    p.add_argument("--hpr", action="store_true", help="filter hidden points before rasterizing")
    p.add_argument("--gamma", type=float, default=2.0, help="hidden-point-removal radius exponent")

    p = sub.add_parser("augment", help="rasterize augmented views from colorized Lidar")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--sigma", type=float, default=1.5, help="translation perturbation std (m)")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="optimize a radiance field on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="run directory (checkpoint, metrics)")
    p.add_argument("--config", help="JSON file mirroring TrainingConfig; flags override it")
    p.add_argument("--encoder", choices=("none", "mlp", "sparse"))
    p.add_argument("--no-depth-sup", action="store_true", help="disable depth supervision")
    p.add_argument("--plain-depth-sup", action="store_true",
                   help="depth supervision without the reliable-sample curriculum")
    p.add_argument("--no-aug", action="store_true", help="disable augmented views")
    p.add_argument("--los-mode", choices=("cdf", "midpoint"))
    p.add_argument("--iterations", type=int)
    p.add_argument("--rays", type=int, help="rays per batch")
    p.add_argument("--seed", type=int)
    p.add_argument("--split", choices=("none", "every4"), default="none",
                   help="hold out every fourth frame from training")
    p.add_argument("--resume", help="checkpoint to continue from (ignores other flags)")
    p.add_argument("--log-every", type=int, default=100)

    p = sub.add_parser("render", help="render views from a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset the checkpoint was trained on")
    p.add_argument("--poses", help="JSON file with a list of 4x4 world-from-camera matrices "
                                   "(default: all dataset poses)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="PSNR/SSIM (and depth error) tables for a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("all", "every4"), default="every4")
    p.add_argument("--out", help="directory for rendered test views and summary.json")

    p = sub.add_parser("selftest", help="run the built-in oracle suites")
    p.add_argument("--suite", choices=("all", "exactness", "gradients"), default="all")
    p.add_argument("--seed", type=int, default=23)

    return parser


# ---------------------------------------------------------------------------
# subcommand handlers


def _cmd_synth(args) -> int:
    from .dataio import generate_dataset
    from .synthetic import SceneConfig, build_scene

    config = SceneConfig(
        width=args.width, height=args.height, frames=args.frames,
        layout=args.preset, lidar_noise=args.lidar_noise, seed=args.seed,
    )
    data = generate_dataset(build_scene(config), args.out)
    print(f"wrote {len(data)} frames ({args.width}x{args.height}, "
          f"preset {args.preset}) to {args.out}")
    return 0


def _cmd_depthmap(args) -> int:
    from .dataio import load_scene, save_depth
    from .trainer import build_depth_maps

    data = load_scene(args.data)
    maps = build_depth_maps(
        data, range(len(data)), args.window, use_hpr=args.hpr, hpr_gamma=args.gamma,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    coverage = []
    for i, m in enumerate(maps):
        save_depth(out / f"sparse_{i:04d}.ldd", m.depth)
        coverage.append(float(m.valid.mean()))
    print(f"wrote {len(maps)} sparse depth maps to {out} "
          f"(mean pixel coverage {np.mean(coverage):.1%})")
    return 0


def _cmd_augment(args) -> int:
    from .dataio import load_scene, save_depth, save_image
    from .synthesis import generate_augmented_views
    from .trainer import colorized_cloud

    data = load_scene(args.data)
    cloud, colors = colorized_cloud(data, range(len(data)))
    views = generate_augmented_views(
        cloud, colors, data.camera, data.poses(), args.count, args.sigma,
        np.random.default_rng(args.seed),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    poses = []
    for i, v in enumerate(views):
        save_image(out / f"aug_{i:04d}.png", v.rgb)
        save_depth(out / f"aug_{i:04d}.ldd", v.depth)
        poses.append({"base": v.base_index, "pose": v.pose.matrix().tolist()})
    (out / "views.json").write_text(json.dumps({"sigma": args.sigma, "views": poses}, indent=1))
    cover = np.mean([v.valid.mean() for v in views]) if views else 0.0
    print(f"wrote {len(views)} augmented views to {out} (mean coverage {cover:.1%})")
    return 0


def _cmd_train(args) -> int:
    from .dataio import load_scene
    from .metrics import every4_split
    from .trainer import Trainer, TrainingConfig

    data = load_scene(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.resume:
        trainer = Trainer.load(args.resume, data)
        print(f"resumed at iteration {trainer.step} from {args.resume}")
    else:
        doc = {}
        if args.config:
            doc = json.loads(Path(args.config).read_text())
            if not isinstance(doc, dict):
                raise ValueError(f"{args.config}: expected a JSON object")
        if args.encoder is not None:
            doc["encoder"] = {"sparse": "sparse_conv"}.get(args.encoder, args.encoder)
        if args.no_depth_sup:
            doc["depth_supervision"] = "none"
        elif args.plain_depth_sup:
            doc["depth_supervision"] = "plain"
        if args.no_aug:
            doc["aug_views"] = 0
        if args.los_mode is not None:
            doc["los_mode"] = args.los_mode
        if args.iterations is not None:
            doc["iterations"] = args.iterations
        if args.rays is not None:
            doc["rays_per_batch"] = args.rays
        if args.seed is not None:
            doc["seed"] = args.seed
        config = TrainingConfig.from_dict(doc)
        train_indices = None
        if args.split == "every4":
            train_indices, _ = every4_split(len(data))
        trainer = Trainer(data, config, train_indices=train_indices)

    def _log(tr, row):
        if tr.step % args.log_every == 0 or tr.step == tr.config.iterations:
            print(f"iter {row['iteration']:6d}  loss {row['loss_total']:.5f}  "
                  f"rgb {row['loss_rgb']:.5f}  depth {row['loss_depth']:.6f}  "
                  f"reliable {row['reliable_frac']:.2f}")

    trainer.fit(on_step=_log)
    ckpt = out / "checkpoint.ldrf"
    trainer.save(ckpt)
    trainer.write_metrics(out / "metrics.csv")
    print(f"saved checkpoint to {ckpt} after {trainer.step} iterations")
    return 0


def _load_pose_file(path):
    from .geometry import SE3Pose

    doc = json.loads(Path(path).read_text())
    if not isinstance(doc, list) or not doc:
        raise ValueError(f"{path}: expected a non-empty JSON list of 4x4 matrices")
    poses = []
    for k, mat in enumerate(doc):
        arr = np.asarray(mat, dtype=np.float64)
        if arr.shape != (4, 4):
            raise ValueError(f"{path}: pose {k} is not a 4x4 matrix")
        poses.append(SE3Pose.from_matrix(arr))
    return poses


def _cmd_render(args) -> int:
    from .dataio import load_scene, save_depth, save_image
    from .trainer import Trainer

    data = load_scene(args.data)
    trainer = Trainer.load(args.checkpoint, data)
    poses = _load_pose_file(args.poses) if args.poses else data.poses()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, pose in enumerate(poses):
        rgb, depth, _ = trainer.render(pose)
        save_image(out / f"render_{i:04d}.png", rgb)
        save_depth(out / f"depth_{i:04d}.ldd", depth)
    print(f"rendered {len(poses)} views to {out}")
    return 0


def _cmd_eval(args) -> int:
    from .dataio import load_scene
    from .metrics import every4_split
    from .trainer import Trainer

    data = load_scene(args.data)
    trainer = Trainer.load(args.checkpoint, data)
    if args.split == "every4":
        _, views = every4_split(len(data))
    else:
        views = list(range(len(data)))
    summary = trainer.evaluate(views, out_dir=args.out)
    for row in summary["views"]:
        extra = f"  depth_mae {row['depth_mae']:.4f}" if "depth_mae" in row else ""
        print(f"view {row['view']:4d}  psnr {row['psnr']:6.2f}  ssim {row['ssim']:.4f}{extra}")
    parts = [f"mean psnr {summary['mean_psnr']:.2f}", f"mean ssim {summary['mean_ssim']:.4f}"]
    if "mean_depth_mae" in summary:
        parts.append(f"mean depth_mae {summary['mean_depth_mae']:.4f}")
    print(f"{len(views)} views: " + "  ".join(parts))
    if args.out:
        with open(Path(args.out) / "summary.json", "w") as fh:
            json.dump(summary, fh, indent=1)
    return 0


def _cmd_selftest(args) -> int:
    from . import selftest

    if args.suite == "exactness":
        results = selftest.exactness_checks()
    elif args.suite == "gradients":
        results = selftest.gradient_checks(args.seed)
    else:
        results = selftest.run_all(args.seed)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return 2 if failed else 0


_HANDLERS = {
    "synth": _cmd_synth,
    "depthmap": _cmd_depthmap,
    "augment": _cmd_augment,
    "train": _cmd_train,
    "render": _cmd_render,
    "eval": _cmd_eval,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _HANDLERS[args.command](args)
    except (ValueError, OSError, json.JSONDecodeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except RuntimeError as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
