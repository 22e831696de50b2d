"""Image and depth quality metrics.

PSNR assumes [0, 1] signals and caps at 99 dB for (near-)identical inputs.
SSIM uses an 11x11 Gaussian window (sigma 1.5, K1 0.01, K2 0.03) over valid
window positions; with a mask, windows containing any masked pixel are
dropped entirely rather than reweighted.
"""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Peak signal-to-noise ratio in dB over unmasked pixels."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    err = (x - y) ** 2
    if mask is not None:
        keep = ~np.asarray(mask, dtype=bool)
        if not keep.any():
            raise ValueError("mask excludes every pixel")
        err = err[keep]
    mse = float(err.mean())
    if mse <= 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP)


def _gaussian_kernel(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (size - 1) / 2
    x = np.arange(size, dtype=np.float64) - half
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _windowed(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation of a (H, W) image with the 1-D kernel."""
    size = kernel.shape[0]
    h, w = img.shape
    rows = np.zeros((h, w - size + 1))
    for i, kv in enumerate(kernel):
        rows += kv * img[:, i : i + w - size + 1]
    out = np.zeros((h - size + 1, w - size + 1))
    for i, kv in enumerate(kernel):
        out += kv * rows[i : i + h - size + 1]
    return out


def ssim(
    a: np.ndarray,
    b: np.ndarray,
    mask: np.ndarray | None = None,
    size: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
) -> float:
    """Mean structural similarity over valid (and fully unmasked) windows.

    Accepts (H, W) or (H, W, 3); channels are averaged. Images smaller than
    the window are rejected.
    """
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x = x[..., None]
        y = y[..., None]
    h, w = x.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than the {size}x{size} window")
    kernel = _gaussian_kernel(size, sigma)
    c1 = k1 ** 2
    c2 = k2 ** 2
    if mask is not None:
        bad = np.asarray(mask, dtype=np.float64)
        # a window survives iff the box sum of masked pixels under it is zero
        ones = np.ones(size)
        hit = _windowed_box(bad, ones)
        keep = hit == 0.0
        if not keep.any():
            raise ValueError("mask excludes every window")
    else:
        keep = None
    vals = []
    for ch in range(x.shape[2]):
        xa = x[..., ch]
        yb = y[..., ch]
        mu_x = _windowed(xa, kernel)
        mu_y = _windowed(yb, kernel)
        xx = _windowed(xa * xa, kernel) - mu_x ** 2
        yy = _windowed(yb * yb, kernel) - mu_y ** 2
        xy = _windowed(xa * yb, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
        smap = num / den
        vals.append(smap[keep].mean() if keep is not None else smap.mean())
    return float(np.mean(vals))


def _windowed_box(img: np.ndarray, ones: np.ndarray) -> np.ndarray:
    size = ones.shape[0]
    h, w = img.shape
    rows = np.zeros((h, w - size + 1))
    for i in range(size):
        rows += img[:, i : i + w - size + 1]
    out = np.zeros((h - size + 1, w - size + 1))
    for i in range(size):
        out += rows[i : i + h - size + 1]
    return out


def depth_mae(pred: np.ndarray, gt: np.ndarray, valid: np.ndarray) -> float:
    """Mean absolute depth error over the valid ground-truth pixels."""
    v = np.asarray(valid, dtype=bool)
    if not v.any():
        raise ValueError("no valid depth pixels")
    return float(np.abs(np.asarray(pred)[v] - np.asarray(gt)[v]).mean())


def every4_split(n: int) -> tuple[np.ndarray, np.ndarray]:
    """(train_indices, test_indices): every fourth frame held out for testing."""
    idx = np.arange(n)
    test = idx[idx % 4 == 0]
    train = idx[idx % 4 != 0]
    return train, test
