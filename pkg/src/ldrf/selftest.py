"""Built-in verification suites.

Three families:
  * exactness checks of the discrete machinery (neighbor queries,
    rasterization, voxelization) against brute-force re-implementations,
  * analytic checks of the Gaussian interval masses (partition of unity,
    quadrature agreement, second-order convergence of the midpoint variant),
  * a finite-difference audit of every differentiable operation: autograd
    gradients at float32 are compared against central differences computed on
    a float64 clone of the same computation.

Each check returns a CheckResult; the CLI prints one line per check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .encoders import LidarEmbeddingSet, MlpPointEncoder, SparseConvEncoder
from .field import RadianceField, LidarContext, volume_render
from .frnn import FrnnIndex
from .geometry import PinholeCamera, SE3Pose, SceneBounds
from .losses import (
    depth_loss,
    distortion_loss,
    gaussian_interval_mass,
    interlevel_loss,
    line_of_sight_loss,
)
from .nets import HashEncoding, Mlp, spherical_harmonics
from .synthesis import rasterize_depth
from .voxel import voxelize


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail}"


# ---------------------------------------------------------------------------
# exactness suites


def check_frnn(seed: int = 7, n_points: int = 1000, n_queries: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-2.0, 2.0, (n_points, 3))
    queries = rng.uniform(-2.2, 2.2, (n_queries, 3))
    index = FrnnIndex(pts, k=6, radius=0.3)
    ids, dists, counts = index.query_batch(queries)
    bids, bdists, bcounts = index.query_bruteforce(queries)
    same = (
        np.array_equal(ids, bids)
        and np.array_equal(counts, bcounts)
        and np.array_equal(dists[ids >= 0], bdists[bids >= 0])
    )
    return CheckResult(
        "frnn_vs_bruteforce",
        same,
        f"{n_points} points, {n_queries} queries: exact id/distance/count match"
        if same
        else "hashed query disagrees with the O(N*Q) scan",
    )


def check_rasterize(seed: int = 11, n_points: int = 4000) -> CheckResult:
    rng = np.random.default_rng(seed)
    cam = PinholeCamera(fx=60.0, fy=55.0, cx=32.0, cy=24.0, width=64, height=48)
    pts = rng.uniform([-3, -3, 0.5], [3, 3, 9.0], (n_points, 3))
    pose = SE3Pose.identity()
    sd = rasterize_depth(pts, cam, pose)
    depth = np.zeros((cam.height, cam.width))
    uv = np.stack(
        [cam.fx * pts[:, 0] / pts[:, 2] + cam.cx, cam.fy * pts[:, 1] / pts[:, 2] + cam.cy],
        axis=1,
    )
    ok = (uv[:, 0] >= 0) & (uv[:, 0] < cam.width) & (uv[:, 1] >= 0) & (uv[:, 1] < cam.height)
    for i in np.flatnonzero(ok):
        px, py = int(uv[i, 0]), int(uv[i, 1])
        d = float(np.linalg.norm(pts[i]))
        if depth[py, px] == 0 or d < depth[py, px]:
            depth[py, px] = d
    same = np.array_equal(sd.depth, depth.astype(np.float32))
    return CheckResult(
        "rasterize_vs_bruteforce",
        bool(same),
        "z-buffer equals per-pixel minimum scan" if same else "depth buffers differ",
    )


def check_voxelize(seed: int = 13, n_points: int = 20000) -> CheckResult:
    rng = np.random.default_rng(seed)
    bounds = SceneBounds(np.array([0.5, -0.25, 1.0]), 4.0)
    pts = rng.uniform(bounds.center - 4.0, bounds.center + 4.0, (n_points, 3))
    grid = voxelize(pts, 16, bounds)
    cells: dict = {}
    origin = bounds.center - bounds.radius
    cell = 2 * bounds.radius / 16
    for p in pts:
        c = tuple(np.floor((p - origin) / cell).astype(int))
        if all(0 <= v < 16 for v in c):
            cells.setdefault(c, []).append(p)
    if len(cells) != len(grid):
        return CheckResult("voxelize_vs_grouping", False, "occupied cell sets differ")
    err = 0.0
    for coord, mean, count in zip(grid.coords, grid.mean_positions, grid.counts):
        ref = cells.get(tuple(coord))
        if ref is None or len(ref) != count:
            return CheckResult("voxelize_vs_grouping", False, f"cell {coord} mismatch")
        err = max(err, float(np.abs(np.mean(ref, axis=0) - mean).max()))
    ok = err < 1e-6
    return CheckResult(
        "voxelize_vs_grouping", ok, f"max mean deviation {err:.2e} (tol 1e-6)"
    )


def _simpson_mass(t0: float, t1: float, mean: float, sigma: float, n: int = 801) -> float:
    x = np.linspace(t0, t1, n)
    pdf = np.exp(-0.5 * ((x - mean) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
    h = (t1 - t0) / (n - 1)
    wts = np.ones(n)
    wts[1:-1:2] = 4.0
    wts[2:-1:2] = 2.0
    return float(h / 3.0 * (pdf * wts).sum())


def check_gaussian_mass(seed: int = 17) -> CheckResult:
    rng = np.random.default_rng(seed)
    msgs = []
    ok = True
    # partition of unity over mu +- 8 sigma for random partitions
    worst = 0.0
    for _ in range(100):
        mean = rng.uniform(-5, 5)
        sigma = rng.uniform(0.05, 2.0)
        cuts = np.sort(
            rng.uniform(mean - 8 * sigma, mean + 8 * sigma, int(rng.integers(3, 40)))
        )
        edges = np.concatenate([[mean - 8 * sigma], cuts, [mean + 8 * sigma]])
        total = gaussian_interval_mass(edges[:-1], edges[1:], mean, sigma, "cdf").sum()
        worst = max(worst, abs(total - 1.0))
    ok &= worst < 1e-6
    msgs.append(f"partition sum err {worst:.2e}")
    # quadrature agreement of the exact route
    qerr = 0.0
    for _ in range(20):
        mean = rng.uniform(-2, 2)
        sigma = rng.uniform(0.1, 1.0)
        a = mean + rng.uniform(-2, 1) * sigma
        b = a + rng.uniform(0.05, 2) * sigma
        exact = float(gaussian_interval_mass(a, b, mean, sigma, "cdf"))
        qerr = max(qerr, abs(exact - _simpson_mass(a, b, mean, sigma)))
    ok &= qerr < 1e-6
    msgs.append(f"quadrature err {qerr:.2e}")
    # midpoint variant converges at second order: halving interval widths
    # shrinks the summed signed gap to the exact masses by about 4x
    mean, sigma = 1.0, 0.7
    lo, hi = mean + 0.1 * sigma, mean + 0.9 * sigma
    ratios = []
    prev = None
    for n in (8, 16, 32, 64):
        edges = np.linspace(lo, hi, n + 1)
        gap = abs(
            (
                gaussian_interval_mass(edges[:-1], edges[1:], mean, sigma, "midpoint")
                - gaussian_interval_mass(edges[:-1], edges[1:], mean, sigma, "cdf")
            ).sum()
        )
        if prev is not None:
            ratios.append(prev / gap)
        prev = gap
    ok &= all(r >= 3.5 for r in ratios)
    msgs.append("midpoint convergence ratios " + ", ".join(f"{r:.2f}" for r in ratios))
    return CheckResult("gaussian_interval_mass", bool(ok), "; ".join(msgs))


# ---------------------------------------------------------------------------
# finite-difference gradient audit


def _fd_probe(
    name: str,
    loss32,
    leaves32: list[torch.Tensor],
    loss64,
    leaves64: list[torch.Tensor],
    rng: np.random.Generator,
    n_probes: int = 20,
    rel_tol: float = 1e-3,
) -> CheckResult:
    """Compare f32 autograd against f64 central differences along random
    directions over the concatenated leaves."""
    value = loss32()
    grads = torch.autograd.grad(value, leaves32, allow_unused=False)
    g32 = np.concatenate([g.detach().cpu().numpy().ravel() for g in grads]).astype(
        np.float64
    )
    sizes = [int(t.numel()) for t in leaves64]
    theta_norm = float(
        np.sqrt(sum(float((t.detach() ** 2).sum()) for t in leaves64))
    )
    h = 1e-4 * max(1.0, theta_norm / np.sqrt(sum(sizes)))
    worst = 0.0
    for _ in range(n_probes):
        v = rng.normal(size=sum(sizes))
        v /= np.linalg.norm(v)
        pieces = np.split(v, np.cumsum(sizes)[:-1])

        def _shift(sign: float):
            with torch.no_grad():
                for t, piece in zip(leaves64, pieces):
                    t += sign * h * torch.as_tensor(
                        piece.reshape(t.shape), dtype=torch.float64
                    )

        _shift(+1.0)
        with torch.no_grad():
            lp = float(loss64())
        _shift(-2.0)
        with torch.no_grad():
            lm = float(loss64())
        _shift(+1.0)
        fd = (lp - lm) / (2 * h)
        dd = float(np.dot(g32, v))
        rel = abs(fd - dd) / max(abs(fd), abs(dd), 1e-8)
        worst = max(worst, rel)
    return CheckResult(
        f"grad_{name}",
        worst < rel_tol,
        f"max rel err {worst:.2e} over {n_probes} probes (tol {rel_tol:.0e})",
    )


def _pair(rng_seed: int, builder):
    """Build the op twice from the same init stream, once f32 once f64."""
    m32 = builder(np.random.default_rng(rng_seed), torch.float32)
    m64 = builder(np.random.default_rng(rng_seed), torch.float64)
    return m32, m64


def gradient_checks(seed: int = 23) -> list[CheckResult]:
    torch.set_num_threads(1)
    rng = np.random.default_rng(seed)
    results = []
    bounds = SceneBounds(np.zeros(3), 2.0)

    # --- plain MLP, gradients w.r.t. parameters and input
    mlp32, mlp64 = _pair(seed, lambda r, dt: Mlp(5, (16, 16), 4, r, dtype=dt))
    x = rng.normal(size=(32, 5))
    proj = rng.normal(size=(32, 4))
    x32 = torch.as_tensor(x, dtype=torch.float32).requires_grad_(True)
    x64 = torch.as_tensor(x, dtype=torch.float64)
    p32 = torch.as_tensor(proj, dtype=torch.float32)
    p64 = torch.as_tensor(proj, dtype=torch.float64)
    results.append(
        _fd_probe(
            "mlp",
            lambda: (mlp32(x32) * p32).sum(),
            [x32, *mlp32.parameters()],
            lambda: (mlp64(x64) * p64).sum(),
            [x64, *mlp64.parameters()],
            rng,
        )
    )

    # --- hash encoding, gradient w.r.t. the table
    h32, h64 = _pair(
        seed + 1,
        lambda r, dt: HashEncoding(
            r, levels=4, features_per_level=2, min_res=4, max_res=16,
            table_size=256, dtype=dt,
        ),
    )
    pts = rng.uniform(0.02, 0.98, (64, 3))
    proj = rng.normal(size=(64, h32.out_dim))
    q32 = torch.as_tensor(pts, dtype=torch.float32)
    q64 = torch.as_tensor(pts, dtype=torch.float64)
    r32 = torch.as_tensor(proj, dtype=torch.float32)
    r64 = torch.as_tensor(proj, dtype=torch.float64)
    results.append(
        _fd_probe(
            "hash_encode",
            lambda: (h32(q32) * r32).sum(),
            [h32.table],
            lambda: (h64(q64) * r64).sum(),
            [h64.table],
            rng,
        )
    )

    # --- spherical harmonics, gradient w.r.t. directions
    dirs = rng.normal(size=(40, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    proj = rng.normal(size=(40, 16))
    d32 = torch.as_tensor(dirs, dtype=torch.float32).requires_grad_(True)
    d64 = torch.as_tensor(dirs, dtype=torch.float64)
    s32 = torch.as_tensor(proj, dtype=torch.float32)
    s64 = torch.as_tensor(proj, dtype=torch.float64)
    results.append(
        _fd_probe(
            "spherical_harmonics",
            lambda: (spherical_harmonics(d32) * s32).sum(),
            [d32],
            lambda: (spherical_harmonics(d64) * s64).sum(),
            [d64],
            rng,
        )
    )

    # --- volume rendering, gradients w.r.t. densities and colors
    edges = np.sort(rng.uniform(0.2, 8.0, (8, 17)), axis=1)
    dens = rng.uniform(0.05, 2.0, (8, 16))
    cols = rng.uniform(0.1, 0.9, (8, 16, 3))
    pr = rng.normal(size=(8, 3))
    pd = rng.normal(size=(8,))
    e32, e64 = (torch.as_tensor(edges, dtype=t) for t in (torch.float32, torch.float64))
    dn32 = torch.as_tensor(dens, dtype=torch.float32).requires_grad_(True)
    dn64 = torch.as_tensor(dens, dtype=torch.float64)
    c32 = torch.as_tensor(cols, dtype=torch.float32).requires_grad_(True)
    c64 = torch.as_tensor(cols, dtype=torch.float64)

    def _vr(e, dn, c, prj, prd):
        out = volume_render(e, dn, c)
        return (out.rgb * prj).sum() + (out.depth * prd).sum() + out.accumulation.sum()

    results.append(
        _fd_probe(
            "volume_render",
            lambda: _vr(e32, dn32, c32, torch.as_tensor(pr, dtype=torch.float32),
                        torch.as_tensor(pd, dtype=torch.float32)),
            [dn32, c32],
            lambda: _vr(e64, dn64, c64, torch.as_tensor(pr), torch.as_tensor(pd)),
            [dn64, c64],
            rng,
        )
    )

    # --- Lidar aggregation: gradient w.r.t. anchor features and the point MLP
    f32_field, f64_field = _pair(
        seed + 2,
        lambda r, dt: RadianceField(
            r, bounds, lidar_dim=8, levels=2, min_res=4, max_res=8,
            table_size=64, hidden=16, geo_features=7, dtype=dt,
        ),
    )
    anchors = rng.uniform(-0.8, 0.8, (50, 3))
    feats = rng.normal(size=(50, 8)) * 0.2
    index = FrnnIndex(anchors, k=4, radius=0.6)
    xq = rng.uniform(-0.7, 0.7, (30, 3))
    proj = rng.normal(size=(30, 8))
    ft32 = torch.as_tensor(feats, dtype=torch.float32).requires_grad_(True)
    ft64 = torch.as_tensor(feats, dtype=torch.float64)
    ctx32 = LidarContext(LidarEmbeddingSet(anchors, ft32), index, 1)
    ctx64 = LidarContext(LidarEmbeddingSet(anchors, ft64), index, 1)
    pj32 = torch.as_tensor(proj, dtype=torch.float32)
    pj64 = torch.as_tensor(proj, dtype=torch.float64)
    results.append(
        _fd_probe(
            "lidar_aggregation",
            lambda: (f32_field.lidar_features(xq, ctx32) * pj32).sum(),
            [ft32, *f32_field.point_mlp.parameters()],
            lambda: (f64_field.lidar_features(xq, ctx64) * pj64).sum(),
            [ft64, *f64_field.point_mlp.parameters()],
            rng,
        )
    )

    # --- fusion decode: gradient w.r.t. fusion/color MLPs, hash table, phi
    xw = rng.uniform(-1.5, 1.5, (24, 3))
    dirs = rng.normal(size=(24, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    phi = rng.normal(size=(24, 8)) * 0.3
    prj = rng.normal(size=(24, 3))
    prd = rng.normal(size=(24,))
    xw32 = torch.as_tensor(xw, dtype=torch.float32)
    xw64 = torch.as_tensor(xw, dtype=torch.float64)
    dr32 = torch.as_tensor(dirs, dtype=torch.float32)
    dr64 = torch.as_tensor(dirs, dtype=torch.float64)
    ph32 = torch.as_tensor(phi, dtype=torch.float32).requires_grad_(True)
    ph64 = torch.as_tensor(phi, dtype=torch.float64)

    def _decode(fld, xq, dq, phq, pj, pd):
        density, rgb, _ = fld.decode(xq, dq, phq)
        return (rgb * pj).sum() + (density * pd).sum()

    leaves32 = [
        ph32, f32_field.encoding.table,
        *f32_field.fuse.parameters(), *f32_field.color.parameters(),
    ]
    leaves64 = [
        ph64, f64_field.encoding.table,
        *f64_field.fuse.parameters(), *f64_field.color.parameters(),
    ]
    results.append(
        _fd_probe(
            "fusion_decode",
            lambda: _decode(f32_field, xw32, dr32, ph32,
                            torch.as_tensor(prj, dtype=torch.float32),
                            torch.as_tensor(prd, dtype=torch.float32)),
            leaves32,
            lambda: _decode(f64_field, xw64, dr64, ph64,
                            torch.as_tensor(prj), torch.as_tensor(prd)),
            leaves64,
            rng,
        )
    )

    # --- voxel encoders
    enc_pts = rng.uniform(-1.8, 1.8, (600, 3))
    enc_grid = voxelize(enc_pts, 8, bounds)

    em32, em64 = _pair(
        seed + 3, lambda r, dt: MlpPointEncoder(r, feature_dim=8, hidden=(16, 16), dtype=dt)
    )
    proj = rng.normal(size=(len(enc_grid), 8))
    results.append(
        _fd_probe(
            "encode_mlp",
            lambda: (em32(enc_grid) * torch.as_tensor(proj, dtype=torch.float32)).sum(),
            list(em32.parameters()),
            lambda: (em64(enc_grid) * torch.as_tensor(proj)).sum(),
            list(em64.parameters()),
            rng,
        )
    )

    es32, es64 = _pair(
        seed + 4, lambda r, dt: SparseConvEncoder(r, feature_dim=8, hidden=(12, 12), dtype=dt)
    )
    results.append(
        _fd_probe(
            "encode_sparse_conv",
            lambda: (es32(enc_grid) * torch.as_tensor(proj, dtype=torch.float32)).sum(),
            list(es32.parameters()),
            lambda: (es64(enc_grid) * torch.as_tensor(proj)).sum(),
            list(es64.parameters()),
            rng,
        )
    )

    # --- loss terms, all driven through densities -> weights
    edges = np.sort(rng.uniform(0.5, 20.0, (6, 13)), axis=1)
    dens = rng.uniform(0.02, 1.0, (6, 12))
    gt = rng.uniform(4.0, 14.0, 6)
    reliable = np.ones(6, dtype=bool)
    e32 = torch.as_tensor(edges, dtype=torch.float32)
    e64 = torch.as_tensor(edges, dtype=torch.float64)
    s_edges = (edges - edges.min()) / (edges.max() - edges.min())
    se32 = torch.as_tensor(s_edges, dtype=torch.float32)
    se64 = torch.as_tensor(s_edges, dtype=torch.float64)

    def _loss_builder(kind: str, e, se, dtype):
        dn = torch.as_tensor(dens, dtype=dtype).requires_grad_(dtype == torch.float32)

        def _loss():
            out = volume_render(e, dn, torch.zeros(6, 12, 3, dtype=dtype))
            if kind == "depth":
                return depth_loss(out.depth, gt, reliable)
            if kind == "sight_cdf":
                return line_of_sight_loss(out.weights, e, gt, reliable, 0.5, "cdf")
            if kind == "sight_midpoint":
                return line_of_sight_loss(out.weights, e, gt, reliable, 0.5, "midpoint")
            if kind == "distortion":
                return distortion_loss(out.weights, se)
            raise AssertionError(kind)

        return dn, _loss

    for kind in ("depth", "sight_cdf", "sight_midpoint", "distortion"):
        dn32, l32 = _loss_builder(kind, e32, se32, torch.float32)
        dn64, l64 = _loss_builder(kind, e64, se64, torch.float64)
        results.append(_fd_probe(f"loss_{kind}", l32, [dn32], l64, [dn64], rng))

    # --- interlevel loss w.r.t. proposal densities
    p_edges = np.sort(rng.uniform(0.0, 1.0, (6, 9)), axis=1)
    p_edges[:, 0] = 0.0
    p_edges[:, -1] = 1.0
    p_dens = rng.uniform(0.1, 2.0, (6, 8))
    f_edges = np.sort(rng.uniform(0.0, 1.0, (6, 13)), axis=1)
    f_dens = rng.uniform(0.1, 2.0, (6, 12))

    def _inter_builder(dtype):
        pe = torch.as_tensor(p_edges, dtype=dtype)
        fe = torch.as_tensor(f_edges, dtype=dtype)
        pd_ = torch.as_tensor(p_dens, dtype=dtype).requires_grad_(dtype == torch.float32)
        fw = volume_render(
            torch.as_tensor(f_edges * 10 + 1, dtype=dtype),
            torch.as_tensor(f_dens, dtype=dtype),
            torch.zeros(6, 12, 3, dtype=dtype),
        ).weights

        def _loss():
            pw = volume_render(
                pe * 10 + 1, pd_, torch.zeros(6, 8, 3, dtype=dtype)
            ).weights
            return interlevel_loss(fe, fw, [(pe, pw)])

        return pd_, _loss

    pd32, il32 = _inter_builder(torch.float32)
    pd64, il64 = _inter_builder(torch.float64)
    results.append(_fd_probe("loss_interlevel", il32, [pd32], il64, [pd64], rng))

    return results


def exactness_checks() -> list[CheckResult]:
    return [check_frnn(), check_rasterize(), check_voxelize(), check_gaussian_mass()]


def run_all(seed: int = 23) -> list[CheckResult]:
    return exactness_checks() + gradient_checks(seed)
