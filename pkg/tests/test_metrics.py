"""PSNR/SSIM/depth-error metrics against brute-force references."""

import numpy as np
import pytest

from ldrf.metrics import depth_mae, every4_split, psnr, ssim


class TestPsnr:
    def test_identical_caps_at_99(self, rng):
        a = rng.random((8, 10, 3))
        assert psnr(a, a.copy()) == 99.0

    def test_constant_offset_closed_form(self):
        a = np.zeros((16, 16))
        b = np.full((16, 16), 0.1)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-12)

    def test_mask_excludes_corruption(self, rng):
        a = rng.random((12, 12))
        b = a.copy()
        b[0, 0] = 5.0
        mask = np.zeros((12, 12), dtype=bool)
        mask[0, 0] = True
        assert psnr(a, b) < 30.0
        assert psnr(a, b, mask) == 99.0

    def test_errors(self, rng):
        a = rng.random((4, 4))
        with pytest.raises(ValueError, match="shape"):
            psnr(a, rng.random((4, 5)))
        with pytest.raises(ValueError, match="mask"):
            psnr(a, a, np.ones((4, 4), dtype=bool))


def _ssim_loop_oracle(a, b, mask=None, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Direct per-window reimplementation used only as a test reference."""
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    h, w, ch = a.shape
    half = (size - 1) / 2
    g1 = np.exp(-0.5 * ((np.arange(size) - half) / sigma) ** 2)
    g1 /= g1.sum()
    kern = np.outer(g1, g1)
    c1, c2 = k1 ** 2, k2 ** 2
    per_channel = []
    for c in range(ch):
        vals = []
        for i in range(h - size + 1):
            for j in range(w - size + 1):
                if mask is not None and mask[i : i + size, j : j + size].any():
                    continue
                wx = a[i : i + size, j : j + size, c]
                wy = b[i : i + size, j : j + size, c]
                mx = (kern * wx).sum()
                my = (kern * wy).sum()
                vx = (kern * wx * wx).sum() - mx ** 2
                vy = (kern * wy * wy).sum() - my ** 2
                vxy = (kern * wx * wy).sum() - mx * my
                num = (2 * mx * my + c1) * (2 * vxy + c2)
                den = (mx ** 2 + my ** 2 + c1) * (vx + vy + c2)
                vals.append(num / den)
        per_channel.append(np.mean(vals))
    return float(np.mean(per_channel))


class TestSsim:
    def test_identical_images_score_one(self, rng):
        a = rng.random((14, 18, 3))
        assert ssim(a, a.copy()) == pytest.approx(1.0, abs=1e-12)

    def test_matches_loop_oracle_gray(self, rng):
        a = rng.random((15, 13))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(_ssim_loop_oracle(a, b), abs=1e-12)

    def test_matches_loop_oracle_color(self, rng):
        a = rng.random((13, 16, 3))
        b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1)
        assert ssim(a, b) == pytest.approx(_ssim_loop_oracle(a, b), abs=1e-12)

    def test_masked_windows_dropped(self, rng):
        a = rng.random((16, 16))
        b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
        mask = np.zeros((16, 16), dtype=bool)
        mask[4, 7] = True
        got = ssim(a, b, mask)
        assert got == pytest.approx(_ssim_loop_oracle(a, b, mask), abs=1e-12)
        assert got != pytest.approx(ssim(a, b), abs=1e-9)

    def test_degradation_orders_scores(self, rng):
        a = rng.random((20, 20))
        small = np.clip(a + rng.normal(0, 0.02, a.shape), 0, 1)
        large = np.clip(a + rng.normal(0, 0.3, a.shape), 0, 1)
        assert ssim(a, small) > ssim(a, large)

    def test_errors(self, rng):
        a = rng.random((10, 10))
        with pytest.raises(ValueError, match="smaller than"):
            ssim(a, a)
        b = rng.random((12, 12))
        with pytest.raises(ValueError, match="shape"):
            ssim(b, rng.random((12, 13)))
        with pytest.raises(ValueError, match="window"):
            ssim(b, b, np.ones((12, 12), dtype=bool))


class TestDepthMae:
    def test_hand_case(self):
        pred = np.array([[1.0, 2.0], [3.0, 4.0]])
        gt = np.array([[1.5, 2.0], [0.0, 5.0]])
        valid = gt > 0
        assert depth_mae(pred, gt, valid) == pytest.approx((0.5 + 0.0 + 1.0) / 3)

    def test_no_valid_pixels(self):
        with pytest.raises(ValueError, match="valid"):
            depth_mae(np.ones(3), np.ones(3), np.zeros(3, dtype=bool))


class TestSplit:
    def test_every4(self):
        train, test = every4_split(40)
        assert len(test) == 10 and len(train) == 30
        assert set(test) == {0, 4, 8, 12, 16, 20, 24, 28, 32, 36}
        assert not (set(train) & set(test))
        assert sorted(set(train) | set(test)) == list(range(40))

    def test_every4_length_80(self):
        train, test = every4_split(80)
        assert len(test) == 20 and len(train) == 60
