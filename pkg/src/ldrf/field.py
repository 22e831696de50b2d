"""The fused radiance field and its ray sampling / volume rendering machinery.

A ray batch runs through two proposal fields (hash + tiny MLP densities) that
successively concentrate samples, then the main field evaluates per-sample
density and color by fusing a multiresolution hash encoding of the contracted
position with features aggregated from the K nearest encoded Lidar anchors.

Sampling bookkeeping lives in a normalized s in [0, 1] coordinate connected to
metric distance t by a spacing map; histograms for the distortion and
interlevel losses are formed in s-space, volume rendering and the
line-of-sight Gaussian masses use metric t.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np
import torch
from torch import nn

from .encoders import LidarEmbeddingSet
from .frnn import FrnnIndex
from .geometry import SceneBounds
from .nets import HashEncoding, Mlp, SH_DIM, spherical_harmonics


def trunc_exp(x: torch.Tensor) -> torch.Tensor:
    """Density activation: exp with the argument clamped to [-15, 15]."""
    return torch.exp(torch.clamp(x, -15.0, 15.0))


def contract_unit(x: torch.Tensor, center: torch.Tensor, radius: float) -> torch.Tensor:
    """Torch version of the scene contraction, mapped into [0, 1]^3."""
    u = (x - center) / radius
    n = torch.linalg.vector_norm(u, dim=-1, keepdim=True)
    safe = torch.clamp(n, min=1e-12)
    c = torch.where(n <= 1.0, u, (2.0 - 1.0 / safe) * (u / safe))
    return (c + 2.0) / 4.0


@dataclass(frozen=True)
class Spacing:
    """Bijection between normalized s in [0, 1] and metric t in [t_near, t_far].

    ``linear`` maps affinely. ``piecewise`` spends s in [0, 0.5] linearly from
    t_near to t_mid and the rest reciprocally (uniform in 1/t) out to t_far,
    which concentrates samples where street geometry actually lives.
    """

    t_near: float
    t_far: float
    kind: str = "piecewise"
    t_mid: float | None = None

    def __post_init__(self):
        if not 0 < self.t_near < self.t_far:
            raise ValueError("require 0 < t_near < t_far")
        if self.kind not in ("linear", "piecewise"):
            raise ValueError(f"unknown spacing kind {self.kind!r}")
        if self.kind == "piecewise":
            mid = self.t_mid if self.t_mid is not None else self.t_far / 4.0
            if not self.t_near < mid < self.t_far:
                mid = 0.5 * (self.t_near + self.t_far)
            object.__setattr__(self, "t_mid", float(mid))

    def s_to_t(self, s: torch.Tensor) -> torch.Tensor:
        if self.kind == "linear":
            return self.t_near + s * (self.t_far - self.t_near)
        lin = self.t_near + 2.0 * s * (self.t_mid - self.t_near)
        inv = 1.0 / self.t_mid + (2.0 * s - 1.0) * (1.0 / self.t_far - 1.0 / self.t_mid)
        return torch.where(s <= 0.5, lin, 1.0 / torch.clamp(inv, min=1.0 / self.t_far))

    def t_to_s(self, t: torch.Tensor) -> torch.Tensor:
        if self.kind == "linear":
            return (t - self.t_near) / (self.t_far - self.t_near)
        lin = (t - self.t_near) / (2.0 * (self.t_mid - self.t_near))
        inv = (1.0 / t - 1.0 / self.t_mid) / (1.0 / self.t_far - 1.0 / self.t_mid)
        return torch.where(t <= self.t_mid, lin, 0.5 + 0.5 * inv)


def stratified_edges(
    n_rays: int, n_samples: int, rng: np.random.Generator | None
) -> torch.Tensor:
    """(B, N+1) monotone edges covering [0, 1] in s-space.

    With an rng, interior edges jitter uniformly between the midpoints of the
    uniform partition (endpoints jitter inward only), so every realization
    still tiles [0, 1] without overlap. Without an rng the uniform partition
    is returned (deterministic evaluation path).
    """
    base = torch.linspace(0.0, 1.0, n_samples + 1, dtype=torch.float64)
    base = base.unsqueeze(0).expand(n_rays, -1)
    if rng is None:
        return base.clone()
    centers = 0.5 * (base[:, 1:] + base[:, :-1])
    lower = torch.cat([base[:, :1], centers], dim=1)
    upper = torch.cat([centers, base[:, -1:]], dim=1)
    u = torch.as_tensor(rng.random((n_rays, n_samples + 1)), dtype=torch.float64)
    return lower + (upper - lower) * u


def resample_edges(
    s_edges: torch.Tensor,
    weights: torch.Tensor,
    n_new: int,
    rng: np.random.Generator | None,
    padding: float = 0.01,
) -> torch.Tensor:
    """Inverse-CDF resampling of n_new+1 new edges from a weight histogram.

    Histogram padding keeps the PDF strictly positive so empty regions retain
    a sliver of probability. Quantiles are stratified; the deterministic path
    uses stratum centers.
    """
    b, n = weights.shape
    w = weights.to(torch.float64) + padding / n
    cdf = torch.cumsum(w, dim=1)
    total = cdf[:, -1:]
    cdf = torch.cat([torch.zeros(b, 1, dtype=torch.float64), cdf / total], dim=1)
    step = 1.0 / (n_new + 1)
    if rng is None:
        u = (torch.arange(n_new + 1, dtype=torch.float64) + 0.5) * step
        u = u.unsqueeze(0).expand(b, -1).contiguous()
    else:
        offsets = torch.as_tensor(rng.random((b, n_new + 1)), dtype=torch.float64)
        u = (torch.arange(n_new + 1, dtype=torch.float64) + offsets) * step
    idx = torch.searchsorted(cdf[:, 1:-1].contiguous(), u, right=True)
    c0 = torch.gather(cdf, 1, idx)
    c1 = torch.gather(cdf, 1, idx + 1)
    e0 = torch.gather(s_edges, 1, idx)
    e1 = torch.gather(s_edges, 1, idx + 1)
    denom = torch.clamp(c1 - c0, min=1e-15)
    frac = torch.clamp((u - c0) / denom, 0.0, 1.0)
    return e0 + frac * (e1 - e0)


def render_transmittance(
    t_edges: torch.Tensor, densities: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-sample compositing weights and alphas from densities on intervals."""
    delta = t_edges[..., 1:] - t_edges[..., :-1]
    alpha = 1.0 - torch.exp(-densities * delta)
    keep = 1.0 - alpha
    trans = torch.cumprod(
        torch.cat([torch.ones_like(keep[..., :1]), keep[..., :-1]], dim=-1), dim=-1
    )
    return trans * alpha, alpha


@dataclass
class RenderOutput:
    rgb: torch.Tensor
    depth: torch.Tensor
    accumulation: torch.Tensor
    weights: torch.Tensor
    t_edges: torch.Tensor
    s_edges: torch.Tensor
    prop_hists: list = dc_field(default_factory=list)


def volume_render(
    t_edges: torch.Tensor, densities: torch.Tensor, colors: torch.Tensor
) -> RenderOutput:
    """Composite colors/depths along rays. Depth is the expected interval
    midpoint normalized by accumulated opacity (background stays black)."""
    w, _ = render_transmittance(t_edges, densities)
    acc = w.sum(-1)
    mids = 0.5 * (t_edges[..., 1:] + t_edges[..., :-1])
    depth = (w * mids).sum(-1) / torch.clamp(acc, min=1e-10)
    rgb = (w.unsqueeze(-1) * colors).sum(-2)
    return RenderOutput(
        rgb=rgb, depth=depth, accumulation=acc, weights=w,
        t_edges=t_edges, s_edges=t_edges,
    )


class ProposalField(nn.Module):
    """Cheap density-only field used to place samples for the main field."""

    def __init__(
        self,
        rng: np.random.Generator,
        bounds: SceneBounds,
        max_res: int = 512,
        levels: int = 5,
        features_per_level: int = 2,
        table_size: int = 2 ** 13,
        hidden: int = 16,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.register_buffer(
            "center", torch.as_tensor(bounds.center, dtype=dtype), persistent=False
        )
        self.radius = float(bounds.radius)
        self.encoding = HashEncoding(
            rng, levels=levels, features_per_level=features_per_level,
            min_res=16, max_res=max_res, table_size=table_size, dtype=dtype,
        )
        self.mlp = Mlp(self.encoding.out_dim, (hidden, hidden), 1, rng, dtype=dtype)

    def density(self, x_world: torch.Tensor) -> torch.Tensor:
        x = contract_unit(x_world.to(self.center.dtype), self.center, self.radius)
        return trunc_exp(self.mlp(self.encoding(x))[..., 0])


@dataclass
class LidarContext:
    """Frozen anchors plus their current features for Lidar feature queries."""

    embeddings: LidarEmbeddingSet
    index: FrnnIndex
    min_neighbors: int = 1


class RadianceField(nn.Module):
    """Main field: hash encoding fused with aggregated Lidar features.

    decode() splits density from a geometry feature vector, then colors it
    with view direction encoded in spherical harmonics. The Lidar feature
    input is zero-filled whenever Lidar conditioning is disabled or no
    neighbors are found, and that zero path is bit-identical to a hash-only
    field built with the same seed.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        bounds: SceneBounds,
        lidar_dim: int = 16,
        levels: int = 16,
        features_per_level: int = 2,
        min_res: int = 16,
        max_res: int = 4096,
        table_size: int = 2 ** 15,
        hidden: int = 64,
        geo_features: int = 15,
        point_mlp_hidden: tuple[int, ...] = (32,),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.register_buffer(
            "center", torch.as_tensor(bounds.center, dtype=dtype), persistent=False
        )
        self.radius = float(bounds.radius)
        self.lidar_dim = lidar_dim
        self.encoding = HashEncoding(
            rng, levels=levels, features_per_level=features_per_level,
            min_res=min_res, max_res=max_res, table_size=table_size, dtype=dtype,
        )
        self.point_mlp = Mlp(lidar_dim + 3, point_mlp_hidden, lidar_dim, rng, dtype=dtype)
        self.fuse = Mlp(
            lidar_dim + self.encoding.out_dim, (hidden, hidden), 1 + geo_features,
            rng, dtype=dtype,
        )
        self.color = Mlp(
            geo_features + SH_DIM, (hidden, hidden), 3, rng,
            out_activation="sigmoid", dtype=dtype,
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.fuse.weights[0].dtype

    def lidar_features(
        self, x_world: np.ndarray, ctx: LidarContext | None
    ) -> torch.Tensor:
        """Aggregate features of the K nearest anchors, Eq. style
        phi = sum_i w_i F([f_i, x - p_i]) / sum_i w_i with w_i = 1 / ||p_i - x||.

        Rows with fewer than min_neighbors anchors inside the radius come back
        all-zero, as does everything when ctx is None.
        """
        n = x_world.shape[0]
        if ctx is None:
            return torch.zeros(n, self.lidar_dim, dtype=self.dtype)
        ids, dists, counts = ctx.index.query_batch(x_world)
        k = ids.shape[1]
        valid = ids >= 0
        row_ok = counts >= max(ctx.min_neighbors, 1)
        valid &= row_ok[:, None]
        if not valid.any():
            return torch.zeros(n, self.lidar_dim, dtype=self.dtype)
        safe_ids = np.where(valid, ids, 0)
        rel = x_world[:, None, :] - ctx.embeddings.positions[safe_ids]
        feats = ctx.embeddings.features.index_select(
            0, torch.as_tensor(safe_ids.reshape(-1))
        ).view(n, k, -1)
        rel_t = torch.as_tensor(rel, dtype=self.dtype)
        per_point = self.point_mlp(torch.cat([feats, rel_t], dim=-1))
        w = np.where(valid, 1.0 / np.clip(dists, 1e-6, None), 0.0)
        wsum = w.sum(axis=1)
        w_norm = w / np.clip(wsum, 1e-30, None)[:, None]
        w_t = torch.as_tensor(w_norm, dtype=self.dtype)
        return (per_point * w_t.unsqueeze(-1)).sum(dim=1)

    def decode(
        self,
        x_world: torch.Tensor,
        directions: torch.Tensor,
        phi_lidar: torch.Tensor,
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (density, rgb, geometry features) for flat (N, 3) inputs."""
        x01 = contract_unit(x_world.to(self.dtype), self.center, self.radius)
        h = self.encoding(x01)
        raw = self.fuse(torch.cat([phi_lidar, h], dim=-1))
        density = trunc_exp(raw[..., 0])
        geo = raw[..., 1:]
        sh = spherical_harmonics(directions.to(self.dtype))
        rgb = self.color(torch.cat([geo, sh], dim=-1))
        return density, rgb, geo


@dataclass
class FieldBundle:
    proposals: list[ProposalField]
    field: RadianceField
    lidar: LidarContext | None = None


def render_rays(
    bundle: FieldBundle,
    origins: np.ndarray,
    directions: np.ndarray,
    spacing: Spacing,
    num_samples: tuple[int, ...] = (64, 32, 16),
    rng: np.random.Generator | None = None,
) -> RenderOutput:
    """Hierarchical sampling and rendering of a ray batch.

    ``origins``/``directions`` are world-frame numpy arrays, directions unit
    norm. Proposal weight histograms stay attached to the torch graph for the
    interlevel loss; resampled edge positions are treated as constants.
    """
    if len(num_samples) != len(bundle.proposals) + 1:
        raise ValueError("need one sample count per proposal stage plus the final")
    o = torch.as_tensor(np.array(origins, dtype=np.float64))
    d = torch.as_tensor(np.array(directions, dtype=np.float64))
    b = o.shape[0]
    s_edges = stratified_edges(b, num_samples[0], rng)
    hists = []
    for prop, n_next in zip(bundle.proposals, num_samples[1:]):
        t_edges = spacing.s_to_t(s_edges)
        mids = 0.5 * (t_edges[:, 1:] + t_edges[:, :-1])
        x = o.unsqueeze(1) + mids.unsqueeze(-1) * d.unsqueeze(1)
        sigma = prop.density(x.reshape(-1, 3)).view(b, -1)
        w, _ = render_transmittance(t_edges.to(sigma.dtype), sigma)
        hists.append((s_edges.to(sigma.dtype), w))
        s_edges = resample_edges(s_edges, w.detach(), n_next, rng)
    t_edges = spacing.s_to_t(s_edges)
    mids = 0.5 * (t_edges[:, 1:] + t_edges[:, :-1])
    x = o.unsqueeze(1) + mids.unsqueeze(-1) * d.unsqueeze(1)
    flat_x = x.reshape(-1, 3)
    phi = bundle.field.lidar_features(flat_x.numpy(), bundle.lidar)
    dirs_flat = d.unsqueeze(1).expand(-1, mids.shape[1], -1).reshape(-1, 3)
    density, rgb, _ = bundle.field.decode(flat_x, dirs_flat, phi)
    density = density.view(b, -1)
    rgb = rgb.view(b, -1, 3)
    out = volume_render(t_edges.to(density.dtype), density, rgb)
    out.s_edges = s_edges.to(density.dtype)
    out.prop_hists = hists
    return out


def render_view(
    bundle: FieldBundle,
    cam,
    world_from_cam,
    spacing: Spacing,
    num_samples: tuple[int, ...] = (64, 32, 16),
    chunk: int = 4096,
):
    """Deterministically render a full view. Returns (rgb, depth, acc) numpy arrays."""
    from .geometry import pixel_grid, pixel_ray_directions

    px = pixel_grid(cam).reshape(-1, 2)
    dirs_cam = pixel_ray_directions(cam, px)
    dirs = dirs_cam @ world_from_cam.rotation.T
    origin = np.broadcast_to(world_from_cam.translation, dirs.shape)
    rgb = np.zeros((dirs.shape[0], 3), dtype=np.float32)
    depth = np.zeros(dirs.shape[0], dtype=np.float32)
    acc = np.zeros(dirs.shape[0], dtype=np.float32)
    with torch.no_grad():
        for lo in range(0, dirs.shape[0], chunk):
            hi = min(lo + chunk, dirs.shape[0])
            out = render_rays(
                bundle, origin[lo:hi], dirs[lo:hi], spacing, num_samples, rng=None
            )
            rgb[lo:hi] = out.rgb.numpy()
            depth[lo:hi] = out.depth.numpy()
            acc[lo:hi] = out.accumulation.numpy()
    h, w = cam.height, cam.width
    return rgb.reshape(h, w, 3), depth.reshape(h, w), acc.reshape(h, w)
