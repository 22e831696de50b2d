"""End-to-end training: dataset preparation, the optimization loop, metrics
logging, checkpointing with bitwise resume, and evaluation.

All stochastic choices flow from one seed through named child streams
(field init, encoder init, augmentation, batch sampling), so two runs with
identical configs and data produce identical parameters, losses, and
checkpoints, and an interrupted run continues exactly where it stopped.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import asdict, dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .checkpoint import load_checkpoint, save_checkpoint
from .dataio import SceneData
from .encoders import make_encoder
from .field import (
    FieldBundle,
    LidarContext,
    ProposalField,
    RadianceField,
    Spacing,
    render_rays,
    render_view,
)
from .frnn import FrnnIndex
from .geometry import (
    accumulate,
    colorize,
    normalize_scene,
    pixel_grid,
    pixel_ray_directions,
)
from .metrics import depth_mae, psnr, ssim
from .optim import Adam, LrSchedule
from .synthesis import generate_augmented_views, hidden_point_removal, rasterize_depth
from .voxel import voxelize

_STREAM_FIELDS = 0
_STREAM_ENCODER = 1
_STREAM_AUG = 2
_STREAM_LOOP = 3


@dataclass
class TrainingConfig:
    iterations: int = 5000
    rays_per_batch: int = 4096
    seed: int = 0
    # optimizer
    optimizer: str = "adam"  # adam | radam
    lr_start: float = 1e-2
    lr_end: float = 1e-4
    lr_horizon: int = 0  # 0: use `iterations`
    # model
    encoder: str = "sparse_conv"  # none | mlp | sparse_conv
    lidar_feature_dim: int = 16
    voxel_resolution: int = 128
    frnn_k: int = 6
    frnn_radius: float = 0.3
    min_neighbors: int = 1
    hash_levels: int = 16
    hash_features: int = 2
    hash_min_res: int = 16
    hash_max_res: int = 4096
    hash_table_size: int = 2 ** 15
    prop_table_size: int = 2 ** 13
    prop_max_res: tuple[int, int] = (512, 1024)
    num_samples: tuple[int, int, int] = (64, 32, 16)
    hidden_width: int = 64
    geo_features: int = 15
    spacing: str = "piecewise"  # piecewise | linear
    t_near: float = 0.1
    t_far: float = 0.0  # 0: four scene radii
    # depth supervision
    depth_supervision: str = "robust"  # none | plain | robust
    accumulation_window: int = 10
    use_hpr: bool = False
    hpr_gamma: float = 2.0
    los_mode: str = "cdf"  # cdf | midpoint
    epsilon_noise: float = 0.15
    weights: L.LossWeights = dc_field(default_factory=L.LossWeights)
    curriculum: L.CurriculumParams = dc_field(default_factory=L.CurriculumParams)
    # augmentation
    aug_views: int = 64
    aug_sigma: float = 1.5

    def __post_init__(self):
        if self.encoder not in ("none", "mlp", "sparse_conv"):
            raise ValueError(f"unknown encoder {self.encoder!r}")
        if self.depth_supervision not in ("none", "plain", "robust"):
            raise ValueError(f"unknown depth supervision {self.depth_supervision!r}")
        if self.los_mode not in ("cdf", "midpoint"):
            raise ValueError(f"unknown line-of-sight mode {self.los_mode!r}")
        if self.optimizer not in ("adam", "radam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.spacing not in ("piecewise", "linear"):
            raise ValueError(f"unknown spacing {self.spacing!r}")
        if self.iterations < 1 or self.rays_per_batch < 1:
            raise ValueError("iterations and rays_per_batch must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["prop_max_res"] = list(self.prop_max_res)
        d["num_samples"] = list(self.num_samples)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainingConfig":
        d = dict(d)
        if "weights" in d and isinstance(d["weights"], dict):
            d["weights"] = L.LossWeights(**d["weights"])
        if "curriculum" in d and isinstance(d["curriculum"], dict):
            d["curriculum"] = L.CurriculumParams(**d["curriculum"])
        for key in ("prop_max_res", "num_samples"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - {f.name for f in TrainingConfig.__dataclass_fields__.values()}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return TrainingConfig(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _spawned(seed: int, key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(key,)))


def build_depth_maps(
    dataset: SceneData,
    view_indices,
    window: int,
    use_hpr: bool = False,
    hpr_gamma: float = 2.0,
    source_indices=None,
):
    """Accumulated sparse depth maps for each view in view_indices.

    Sweeps come from ``source_indices`` (default: the views themselves); the
    temporal window is selected per reference view. Optionally hidden-point
    removal from the view's camera center filters the accumulated cloud before
    rasterization.
    """
    src = list(source_indices if source_indices is not None else view_indices)
    sweeps = [dataset.sweep(i) for i in src]
    poses = [dataset.frames[i].pose for i in src]
    maps = []
    for vi in view_indices:
        ref = src.index(vi)
        pts = accumulate(sweeps, poses, window=window, reference=ref)
        pose = dataset.frames[vi].pose
        if use_hpr and pts.shape[0] > 0:
            vis = hidden_point_removal(pts, pose.translation, gamma=hpr_gamma)
            pts = pts[vis]
        maps.append(rasterize_depth(pts, dataset.camera, pose.inverse()))
    return maps


def colorized_cloud(dataset: SceneData, view_indices):
    """Merge per-frame sweeps into one world-frame cloud with image colors.

    Each sweep is colorized against its own frame only, so no cross-frame
    parallax can bleed wrong colors onto points.
    """
    pts_parts, rgb_parts = [], []
    for i in view_indices:
        sweep = dataset.sweep(i)
        pose = dataset.frames[i].pose
        world_pts = pose.apply(sweep.points)
        p, c = colorize(world_pts, dataset.image(i), dataset.camera, pose.inverse())
        pts_parts.append(p)
        rgb_parts.append(c)
    return np.concatenate(pts_parts), np.concatenate(rgb_parts)


def _ray_pools(dataset, view_indices, depth_maps, aug_views):
    """Flatten supervised pixels of real and augmented views into ray arrays."""
    cam = dataset.camera
    grid = pixel_grid(cam).reshape(-1, 2)
    dirs_cam = pixel_ray_directions(cam, grid)
    origins, dirs, rgbs, depths, has_d, is_aug, view_ids, pix_ids = (
        [], [], [], [], [], [], [], []
    )
    for slot, vi in enumerate(view_indices):
        pose = dataset.frames[vi].pose
        mask = dataset.mask(vi)
        keep = np.ones(grid.shape[0], dtype=bool) if mask is None else ~mask.reshape(-1)
        img = dataset.image(vi).reshape(-1, 3)
        dmap = depth_maps[slot].depth.reshape(-1)
        sel = np.flatnonzero(keep)
        dirs.append(dirs_cam[sel] @ pose.rotation.T)
        origins.append(np.broadcast_to(pose.translation, (sel.size, 3)).copy())
        rgbs.append(img[sel])
        depths.append(dmap[sel])
        has_d.append(dmap[sel] > 0)
        is_aug.append(np.zeros(sel.size, dtype=bool))
        view_ids.append(np.full(sel.size, slot, dtype=np.int32))
        pix_ids.append(sel.astype(np.int32))
    for ai, av in enumerate(aug_views):
        sel = np.flatnonzero(av.valid.reshape(-1))
        dirs.append(dirs_cam[sel] @ av.pose.rotation.T)
        origins.append(np.broadcast_to(av.pose.translation, (sel.size, 3)).copy())
        rgbs.append(av.rgb.reshape(-1, 3)[sel])
        depths.append(av.depth.reshape(-1)[sel])
        has_d.append(np.ones(sel.size, dtype=bool))
        is_aug.append(np.ones(sel.size, dtype=bool))
        view_ids.append(np.full(sel.size, -(ai + 1), dtype=np.int32))
        pix_ids.append(sel.astype(np.int32))
    return {
        "origins": np.concatenate(origins),
        "dirs": np.concatenate(dirs),
        "rgb": np.concatenate(rgbs).astype(np.float32),
        "depth": np.concatenate(depths).astype(np.float64),
        "has_depth": np.concatenate(has_d),
        "is_aug": np.concatenate(is_aug),
        "view_ids": np.concatenate(view_ids),
        "pix_ids": np.concatenate(pix_ids),
    }


class Trainer:
    """Owns the models, the data-derived structures, and the optimization loop."""

    def __init__(
        self,
        dataset: SceneData,
        config: TrainingConfig,
        train_indices=None,
    ):
        torch.set_num_threads(1)
        self.dataset = dataset
        self.config = config
        self.train_indices = list(
            train_indices if train_indices is not None else range(len(dataset))
        )
        if not self.train_indices:
            raise ValueError("no training views")
        cfg = config
        self.bounds = normalize_scene(dataset.camera_positions())
        t_far = cfg.t_far if cfg.t_far > 0 else 4.0 * self.bounds.radius
        self.spacing = Spacing(cfg.t_near, t_far, kind=cfg.spacing)

        # --- depth supervision targets -------------------------------
        self.depth_maps = build_depth_maps(
            dataset, self.train_indices, cfg.accumulation_window,
            use_hpr=cfg.use_hpr, hpr_gamma=cfg.hpr_gamma,
        )

        # --- Lidar feature anchors ------------------------------------
        rng_enc = _spawned(cfg.seed, _STREAM_ENCODER)
        self.encoder = make_encoder(cfg.encoder, rng_enc, cfg.lidar_feature_dim)
        self.grid = None
        self.frnn = None
        if self.encoder is not None:
            sweeps = [dataset.sweep(i) for i in self.train_indices]
            poses = [dataset.frames[i].pose for i in self.train_indices]
            cloud = accumulate(sweeps, poses, window=None)
            self.grid = voxelize(cloud, cfg.voxel_resolution, self.bounds)
            if len(self.grid) == 0:
                raise ValueError("no Lidar points fall inside the scene bounds")
            self.frnn = FrnnIndex(
                self.grid.mean_positions, k=cfg.frnn_k, radius=cfg.frnn_radius
            )

        # --- augmented views ------------------------------------------
        rng_aug = _spawned(cfg.seed, _STREAM_AUG)
        self.aug_views = []
        if cfg.aug_views > 0:
            cloud, cloud_rgb = colorized_cloud(dataset, self.train_indices)
            self.aug_views = generate_augmented_views(
                cloud, cloud_rgb, dataset.camera,
                [dataset.frames[i].pose for i in self.train_indices],
                cfg.aug_views, cfg.aug_sigma, rng_aug,
            )

        # --- models ----------------------------------------------------
        rng_fields = _spawned(cfg.seed, _STREAM_FIELDS)
        self.proposals = [
            ProposalField(
                rng_fields, self.bounds, max_res=r, table_size=cfg.prop_table_size
            )
            for r in cfg.prop_max_res
        ]
        self.field = RadianceField(
            rng_fields, self.bounds,
            lidar_dim=cfg.lidar_feature_dim,
            levels=cfg.hash_levels, features_per_level=cfg.hash_features,
            min_res=cfg.hash_min_res, max_res=cfg.hash_max_res,
            table_size=cfg.hash_table_size,
            hidden=cfg.hidden_width, geo_features=cfg.geo_features,
        )
        self.params: dict[str, torch.nn.Parameter] = {}
        for prefix, module in self._modules():
            for name, p in module.named_parameters():
                self.params[f"{prefix}.{name}"] = p
        horizon = cfg.lr_horizon if cfg.lr_horizon > 0 else cfg.iterations
        self.optimizer = Adam(
            self.params,
            LrSchedule(cfg.lr_start, cfg.lr_end, horizon),
            radam=(cfg.optimizer == "radam"),
        )

        # --- ray pools and loop state ---------------------------------
        self.pools = _ray_pools(
            dataset, self.train_indices, self.depth_maps, self.aug_views
        )
        self.rng = _spawned(cfg.seed, _STREAM_LOOP)
        self.curriculum = L.curriculum_init(cfg.curriculum)
        self.step = 0
        self.metrics_rows: list[dict] = []

    def _modules(self):
        mods = [(f"prop{i}", p) for i, p in enumerate(self.proposals)]
        mods.append(("field", self.field))
        if self.encoder is not None:
            mods.append(("encoder", self.encoder))
        return mods

    def _bundle(self) -> FieldBundle:
        lidar = None
        if self.encoder is not None:
            emb = self.encoder.encode(self.grid)
            lidar = LidarContext(emb, self.frnn, self.config.min_neighbors)
        return FieldBundle(self.proposals, self.field, lidar)

    # ---- the loop -----------------------------------------------------

    def train_step(self) -> dict:
        cfg = self.config
        w = cfg.weights
        n = self.pools["origins"].shape[0]
        idx = self.rng.integers(0, n, size=cfg.rays_per_batch)
        origins = self.pools["origins"][idx]
        dirs = self.pools["dirs"][idx]
        target_rgb = torch.as_tensor(self.pools["rgb"][idx])
        depth_t = self.pools["depth"][idx]
        has_depth = self.pools["has_depth"][idx]
        aug = self.pools["is_aug"][idx]
        real = ~aug

        out = render_rays(
            self._bundle(), origins, dirs, self.spacing, cfg.num_samples, self.rng
        )
        rendered_depth = out.depth.detach().cpu().numpy().astype(np.float64)

        def _masked_mse(pred, target, mask):
            if not mask.any():
                return pred.sum() * 0.0
            sel = torch.as_tensor(np.flatnonzero(mask))
            return ((pred.index_select(0, sel) - target.index_select(0, sel)) ** 2).mean()

        loss_rgb = _masked_mse(out.rgb, target_rgb, real)
        loss_dist = L.distortion_loss(out.weights, out.s_edges)
        loss_inter = L.interlevel_loss(out.s_edges, out.weights, out.prop_hists)

        zero = out.rgb.sum() * 0.0
        loss_depth = zero
        loss_sight = zero
        loss_aug_rgb = zero
        loss_aug_depth = zero
        loss_aug_sight = zero
        n_sup = 0
        n_rel = 0
        reliable_all = np.zeros(cfg.rays_per_batch, dtype=bool)

        if cfg.depth_supervision != "none":
            if cfg.depth_supervision == "robust":
                reliable = L.select_reliable(
                    depth_t, rendered_depth, self.curriculum, has_depth
                )
            else:
                reliable = has_depth.copy()
            reliable_all = reliable
            n_sup = int(has_depth.sum())
            n_rel = int(reliable.sum())
            rel_real = reliable & real
            loss_depth = L.depth_loss(out.depth, depth_t, rel_real)
            loss_sight = L.line_of_sight_loss(
                out.weights, out.t_edges, depth_t, rel_real,
                cfg.epsilon_noise, cfg.los_mode,
            )
            if aug.any():
                rel_aug = reliable & aug
                loss_aug_depth = L.depth_loss(out.depth, depth_t, rel_aug)
                loss_aug_sight = L.line_of_sight_loss(
                    out.weights, out.t_edges, depth_t, rel_aug,
                    cfg.epsilon_noise, cfg.los_mode,
                )
        if aug.any():
            loss_aug_rgb = _masked_mse(out.rgb, target_rgb, aug)

        loss_aug = loss_aug_rgb + w.lambda_depth * (loss_aug_depth + loss_aug_sight)
        total = (
            loss_rgb
            + w.lambda_dist * loss_dist
            + w.lambda_interlevel * loss_inter
            + w.lambda_depth * (loss_depth + loss_sight)
            + w.lambda_aug * loss_aug
        )
        self.optimizer.zero_grad()
        total.backward()
        self.optimizer.step()
        self.curriculum = L.schedule_step(self.curriculum, self.config.curriculum)
        self.step += 1

        row = {
            "iteration": self.step,
            "loss_total": float(total.detach()),
            "loss_rgb": float(loss_rgb.detach()),
            "loss_distortion": float(loss_dist.detach()),
            "loss_interlevel": float(loss_inter.detach()),
            "loss_depth": float(loss_depth.detach()),
            "loss_sight": float(loss_sight.detach()),
            "loss_aug_rgb": float(loss_aug_rgb.detach()),
            "loss_aug_depth": float(loss_aug_depth.detach()),
            "loss_aug_sight": float(loss_aug_sight.detach()),
            "eps_t": self.curriculum.eps_t,
            "eps_o": self.curriculum.eps_o,
            "reliable_frac": (n_rel / n_sup) if n_sup else 1.0,
        }
        self.metrics_rows.append(row)
        self._last_batch = {
            "indices": idx,
            "has_depth": has_depth,
            "reliable": reliable_all,
            "is_aug": aug,
            "view_ids": self.pools["view_ids"][idx],
            "pix_ids": self.pools["pix_ids"][idx],
            "depth_target": depth_t,
            "rendered_depth": rendered_depth,
        }
        return row

    def fit(self, iterations: int | None = None, on_step=None) -> None:
        remaining = (
            iterations if iterations is not None else self.config.iterations - self.step
        )
        for _ in range(max(remaining, 0)):
            row = self.train_step()
            if on_step is not None:
                on_step(self, row)

    # ---- evaluation ----------------------------------------------------

    def render(self, pose, chunk: int = 4096):
        return render_view(
            self._bundle(), self.dataset.camera, pose, self.spacing,
            self.config.num_samples, chunk=chunk,
        )

    def evaluate(self, view_indices, out_dir=None) -> dict:
        """PSNR/SSIM (and depth MAE where ground truth exists) over views."""
        from .dataio import save_depth, save_image

        rows = []
        out_path = Path(out_dir) if out_dir is not None else None
        if out_path is not None:
            out_path.mkdir(parents=True, exist_ok=True)
        for vi in view_indices:
            frame = self.dataset.frames[vi]
            rgb, depth, _ = self.render(frame.pose)
            gt = self.dataset.image(vi)
            mask = self.dataset.mask(vi)
            row = {
                "view": int(vi),
                "psnr": psnr(rgb, gt, mask),
                "ssim": ssim(rgb, gt, mask),
            }
            gt_d = self.dataset.gt_depth(vi)
            if gt_d is not None:
                valid = gt_d > 0
                if mask is not None:
                    valid &= ~mask
                row["depth_mae"] = depth_mae(depth, gt_d, valid)
            rows.append(row)
            if out_path is not None:
                save_image(out_path / f"render_{vi:04d}.png", rgb)
                save_depth(out_path / f"depth_{vi:04d}.ldd", depth)
        summary = {"views": rows}
        for key in ("psnr", "ssim", "depth_mae"):
            vals = [r[key] for r in rows if key in r]
            if vals:
                summary[f"mean_{key}"] = float(np.mean(vals))
        return summary

    def write_metrics(self, path) -> None:
        if not self.metrics_rows:
            return
        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(self.metrics_rows[0].keys()))
            writer.writeheader()
            writer.writerows(self.metrics_rows)

    # ---- checkpointing --------------------------------------------------

    def save(self, path) -> None:
        blocks = {
            name: p.detach().cpu().numpy() for name, p in self.params.items()
        }
        blocks.update(self.optimizer.state_blocks())
        extra = {
            "config": self.config.to_dict(),
            "rng": self.rng.bit_generator.state,
            "curriculum": {
                "eps_t": self.curriculum.eps_t.hex(),
                "eps_o": self.curriculum.eps_o.hex(),
                "iteration": self.curriculum.iteration,
            },
            "optimizer_steps": self.optimizer.step_count,
            "skipped_steps": self.optimizer.skipped_steps,
            "train_indices": [int(i) for i in self.train_indices],
        }
        save_checkpoint(path, blocks, self.step, self.config.config_hash(), extra)

    @classmethod
    def load(cls, path, dataset: SceneData) -> "Trainer":
        blocks, step, config_hash, extra = load_checkpoint(path)
        config = TrainingConfig.from_dict(extra["config"])
        if config.config_hash() != config_hash:
            raise ValueError("checkpoint config hash mismatch")
        trainer = cls(dataset, config, train_indices=extra.get("train_indices"))
        with torch.no_grad():
            for name, p in trainer.params.items():
                if name not in blocks:
                    raise ValueError(f"checkpoint missing parameter block {name!r}")
                arr = blocks[name]
                if tuple(arr.shape) != tuple(p.shape):
                    raise ValueError(
                        f"parameter {name!r} has shape {tuple(p.shape)}, "
                        f"checkpoint holds {tuple(arr.shape)}"
                    )
                p.copy_(torch.as_tensor(arr))
        trainer.optimizer.load_state_blocks(blocks)
        trainer.optimizer.step_count = extra["optimizer_steps"]
        trainer.optimizer.skipped_steps = extra.get("skipped_steps", 0)
        trainer.step = step
        cur = extra["curriculum"]
        trainer.curriculum = L.CurriculumState(
            float.fromhex(cur["eps_t"]), float.fromhex(cur["eps_o"]), cur["iteration"]
        )
        trainer.rng.bit_generator.state = extra["rng"]
        return trainer
