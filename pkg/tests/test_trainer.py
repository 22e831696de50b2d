"""Training loop determinism, checkpoint resume, and evaluation outputs."""

import numpy as np
import pytest
import torch

from ldrf.dataio import load_scene
from ldrf.losses import CurriculumParams, LossWeights
from ldrf.trainer import (
    Trainer,
    TrainingConfig,
    build_depth_maps,
    colorized_cloud,
)

ROW_KEYS = [
    "iteration", "loss_total", "loss_rgb", "loss_distortion",
    "loss_interlevel", "loss_depth", "loss_sight", "loss_aug_rgb",
    "loss_aug_depth", "loss_aug_sight", "eps_t", "eps_o", "reliable_frac",
]


def _fast_config(**kw):
    base = dict(
        iterations=6,
        rays_per_batch=64,
        seed=3,
        encoder="mlp",
        lidar_feature_dim=4,
        voxel_resolution=24,
        frnn_k=4,
        frnn_radius=1.0,
        hash_levels=4,
        hash_max_res=128,
        hash_table_size=2 ** 10,
        prop_table_size=2 ** 9,
        prop_max_res=[64, 128],
        num_samples=[16, 8, 4],
        hidden_width=16,
        geo_features=7,
        accumulation_window=3,
        aug_views=2,
        aug_sigma=0.3,
    )
    base.update(kw)
    return TrainingConfig.from_dict(base)


@pytest.fixture(scope="module")
def dataset(tiny_scene_dir):
    return load_scene(tiny_scene_dir)


class TestConfig:
    def test_roundtrip_and_hash_stability(self):
        cfg = _fast_config()
        back = TrainingConfig.from_dict(cfg.to_dict())
        assert back == cfg
        assert back.config_hash() == cfg.config_hash()
        assert len(cfg.config_hash()) == 16

    def test_nested_dataclasses_from_dict(self):
        cfg = TrainingConfig.from_dict(
            {
                "weights": {"lambda_depth": 1e-3},
                "curriculum": {"eps_t_init": 5.0},
            }
        )
        assert cfg.weights == LossWeights(lambda_depth=1e-3)
        assert cfg.curriculum == CurriculumParams(eps_t_init=5.0)

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys"):
            TrainingConfig.from_dict({"learning_rate": 0.1})

    def test_enum_validation(self):
        with pytest.raises(ValueError, match="encoder"):
            TrainingConfig(encoder="conv2d")
        with pytest.raises(ValueError, match="depth supervision"):
            TrainingConfig(depth_supervision="soft")
        with pytest.raises(ValueError, match="line-of-sight"):
            TrainingConfig(los_mode="simpson")
        with pytest.raises(ValueError, match="optimizer"):
            TrainingConfig(optimizer="sgd")
        with pytest.raises(ValueError, match="spacing"):
            TrainingConfig(spacing="cubic")

    def test_hash_changes_with_values(self):
        assert _fast_config().config_hash() != _fast_config(seed=4).config_hash()


class TestDepthMaps:
    def test_shapes_and_coverage(self, dataset):
        maps = build_depth_maps(dataset, [0, 1, 2], window=2)
        assert len(maps) == 3
        cam = dataset.camera
        for m in maps:
            assert m.depth.shape == (cam.height, cam.width)
            assert m.valid.mean() > 0.05

    def test_wider_window_covers_no_less(self, dataset):
        narrow = build_depth_maps(dataset, [2], window=1)[0]
        wide = build_depth_maps(dataset, [2], window=5)[0]
        assert wide.valid.sum() >= narrow.valid.sum()

    def test_hpr_only_removes_points(self, dataset):
        plain = build_depth_maps(dataset, [1], window=3)[0]
        filtered = build_depth_maps(dataset, [1], window=3, use_hpr=True)[0]
        assert filtered.valid.sum() <= plain.valid.sum()
        assert filtered.valid.sum() > 0
        assert (plain.valid | ~filtered.valid).all()  # valid set shrinks only


def test_colorized_cloud_shapes(dataset):
    pts, cols = colorized_cloud(dataset, [0, 1])
    assert pts.shape == cols.shape
    assert pts.shape[1] == 3
    assert pts.shape[0] > 100
    assert cols.min() >= 0.0 and cols.max() <= 1.0


class TestLoop:
    def test_row_keys_and_last_batch(self, dataset):
        tr = Trainer(dataset, _fast_config())
        row = tr.train_step()
        assert list(row.keys()) == ROW_KEYS
        assert row["iteration"] == 1
        assert np.isfinite(row["loss_total"])
        lb = tr._last_batch
        for key in ("indices", "has_depth", "reliable", "is_aug",
                    "view_ids", "pix_ids", "depth_target", "rendered_depth"):
            assert lb[key].shape[0] == 64
        assert (~lb["reliable"] | lb["has_depth"]).all()

    def test_bitwise_determinism(self, dataset):
        cfg = _fast_config()
        a = Trainer(dataset, cfg)
        b = Trainer(dataset, cfg)
        rows_a = [a.train_step() for _ in range(3)]
        rows_b = [b.train_step() for _ in range(3)]
        assert rows_a == rows_b
        for name in a.params:
            assert torch.equal(a.params[name], b.params[name]), name

    def test_resume_is_bitwise(self, dataset, tmp_path):
        cfg = _fast_config()
        ref = Trainer(dataset, cfg)
        ref.fit(4)
        ck = tmp_path / "mid.ldrf"
        ref.save(ck)
        tail_ref = [ref.train_step() for _ in range(2)]

        resumed = Trainer.load(ck, dataset)
        assert resumed.step == 4
        tail_got = [resumed.train_step() for _ in range(2)]
        assert tail_got == tail_ref
        for name in ref.params:
            assert torch.equal(ref.params[name], resumed.params[name]), name
        assert resumed.optimizer.step_count == ref.optimizer.step_count
        assert resumed.curriculum == ref.curriculum

    def test_field_init_independent_of_encoder(self, dataset):
        plain = Trainer(dataset, _fast_config(encoder="none", aug_views=0))
        fused = Trainer(dataset, _fast_config(encoder="mlp", aug_views=0))
        for name, p in plain.field.named_parameters():
            assert torch.equal(p, dict(fused.field.named_parameters())[name]), name
        for i, prop in enumerate(plain.proposals):
            other = dict(fused.proposals[i].named_parameters())
            for name, p in prop.named_parameters():
                assert torch.equal(p, other[name]), name

    def test_no_training_views_rejected(self, dataset):
        with pytest.raises(ValueError, match="training views"):
            Trainer(dataset, _fast_config(), train_indices=[])

    def test_fit_respects_configured_horizon(self, dataset):
        tr = Trainer(dataset, _fast_config(iterations=3, aug_views=0))
        tr.fit()
        assert tr.step == 3
        tr.fit()  # nothing left to do
        assert tr.step == 3

    def test_no_depth_supervision_zeroes_terms(self, dataset):
        tr = Trainer(
            dataset,
            _fast_config(depth_supervision="none", aug_views=0, encoder="none"),
        )
        row = tr.train_step()
        assert row["loss_depth"] == 0.0
        assert row["loss_sight"] == 0.0
        assert row["loss_aug_rgb"] == 0.0
        assert row["reliable_frac"] == 1.0


class TestEvaluation:
    def test_evaluate_and_artifacts(self, dataset, tmp_path):
        tr = Trainer(dataset, _fast_config(aug_views=0))
        tr.fit(2)
        out = tmp_path / "eval"
        summary = tr.evaluate([0, 4], out_dir=out)
        assert [r["view"] for r in summary["views"]] == [0, 4]
        for r in summary["views"]:
            assert 0 <= r["psnr"] <= 99.0
            assert -1.0 <= r["ssim"] <= 1.0
            assert r["depth_mae"] >= 0.0
        assert "mean_psnr" in summary and "mean_depth_mae" in summary
        assert (out / "render_0000.png").is_file()
        assert (out / "depth_0004.ldd").is_file()

    def test_render_shapes(self, dataset):
        tr = Trainer(dataset, _fast_config(aug_views=0, encoder="none"))
        rgb, depth, acc = tr.render(dataset.frames[0].pose)
        cam = dataset.camera
        assert rgb.shape == (cam.height, cam.width, 3)
        assert depth.shape == (cam.height, cam.width)
        assert acc.shape == (cam.height, cam.width)
        assert np.isfinite(rgb).all()

    def test_metrics_csv(self, dataset, tmp_path):
        tr = Trainer(dataset, _fast_config(aug_views=0, encoder="none"))
        tr.fit(2)
        path = tmp_path / "metrics.csv"
        tr.write_metrics(path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == ",".join(ROW_KEYS)
        assert len(lines) == 3
