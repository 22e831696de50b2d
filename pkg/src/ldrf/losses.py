"""Training losses and the occlusion-aware depth curriculum.

Depth supervision is robustified by a reliable-sample selector with two
scheduled thresholds: a truncation bound eps_t that grows from 10 m toward
100 m (geometric rate alpha_t) and an occlusion bound eps_o that shrinks from
1 m toward 0.15 m (rate alpha_o). A Lidar depth D on a ray with rendered
depth D_hat is reliable at iteration m iff

    D <= eps_t^m   and   D <= D_hat + eps_o^m.

The line-of-sight term matches per-sample rendering weights against the mass
a Gaussian around the measured depth assigns to each sample interval, either
exactly through the error function or with the midpoint-pdf approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy.special import erf

_SQRT2 = float(np.sqrt(2.0))


@dataclass(frozen=True)
class CurriculumParams:
    eps_t_init: float = 10.0
    eps_t_max: float = 100.0
    alpha_t: float = 1.00004
    eps_o_init: float = 1.0
    eps_o_min: float = 0.15
    alpha_o: float = 0.99995

    def __post_init__(self):
        if not 0 < self.eps_t_init <= self.eps_t_max:
            raise ValueError("require 0 < eps_t_init <= eps_t_max")
        if not 0 < self.eps_o_min <= self.eps_o_init:
            raise ValueError("require 0 < eps_o_min <= eps_o_init")
        if self.alpha_t < 1.0:
            raise ValueError("alpha_t must be >= 1 (eps_t grows)")
        if not 0 < self.alpha_o <= 1.0:
            raise ValueError("alpha_o must be in (0, 1] (eps_o shrinks)")


@dataclass(frozen=True)
class CurriculumState:
    eps_t: float
    eps_o: float
    iteration: int = 0


def curriculum_init(params: CurriculumParams) -> CurriculumState:
    return CurriculumState(params.eps_t_init, params.eps_o_init, 0)


def schedule_step(state: CurriculumState, params: CurriculumParams) -> CurriculumState:
    return CurriculumState(
        min(state.eps_t * params.alpha_t, params.eps_t_max),
        max(state.eps_o * params.alpha_o, params.eps_o_min),
        state.iteration + 1,
    )


def select_reliable(
    depth_target: np.ndarray,
    rendered_depth: np.ndarray,
    state: CurriculumState,
    has_depth: np.ndarray,
) -> np.ndarray:
    """Boolean mask of samples admitted to the depth losses this iteration.

    The mask is a hard selection computed from detached rendered depth; no
    gradient flows through it.
    """
    return (
        has_depth
        & (depth_target <= state.eps_t)
        & (depth_target <= rendered_depth + state.eps_o)
    )


def gaussian_interval_mass(t0, t1, mean, sigma, mode: str = "cdf") -> np.ndarray:
    """Probability a N(mean, sigma^2) assigns to [t0, t1].

    ``cdf`` evaluates the difference of error functions exactly; ``midpoint``
    uses pdf(midpoint) * width, a second-order approximation that the tests
    compare against quadrature.
    """
    t0 = np.asarray(t0, dtype=np.float64)
    t1 = np.asarray(t1, dtype=np.float64)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    if mode == "cdf":
        a = (t0 - mean) / (sigma * _SQRT2)
        b = (t1 - mean) / (sigma * _SQRT2)
        return 0.5 * (erf(b) - erf(a))
    if mode == "midpoint":
        mid = 0.5 * (t0 + t1)
        pdf = np.exp(-0.5 * ((mid - mean) / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))
        return pdf * (t1 - t0)
    raise ValueError(f"unknown line-of-sight mode {mode!r}")


def depth_loss(
    rendered_depth: torch.Tensor, depth_target: np.ndarray, reliable: np.ndarray
) -> torch.Tensor:
    """Mean squared depth error over the reliable set (zero when empty)."""
    if not reliable.any():
        return rendered_depth.sum() * 0.0
    idx = torch.as_tensor(np.flatnonzero(reliable))
    target = torch.as_tensor(
        depth_target[reliable], dtype=rendered_depth.dtype
    )
    return ((rendered_depth.index_select(0, idx) - target) ** 2).mean()


def line_of_sight_loss(
    weights: torch.Tensor,
    t_edges: torch.Tensor,
    depth_target: np.ndarray,
    reliable: np.ndarray,
    sigma: float,
    mode: str = "cdf",
) -> torch.Tensor:
    """Sum over samples of (w_i - N_i)^2, averaged over reliable rays.

    N_i is the Gaussian interval mass around the measured depth; it carries no
    gradient (edges and targets are constants), so the term shapes the weight
    distribution only.
    """
    if not reliable.any():
        return weights.sum() * 0.0
    idx = np.flatnonzero(reliable)
    edges = t_edges.detach().cpu().numpy().astype(np.float64)[idx]
    target = gaussian_interval_mass(
        edges[:, :-1], edges[:, 1:], depth_target[idx][:, None], sigma, mode
    )
    w = weights.index_select(0, torch.as_tensor(idx))
    n = torch.as_tensor(target, dtype=weights.dtype)
    return ((w - n) ** 2).sum(dim=1).mean()


def distortion_loss(weights: torch.Tensor, s_edges: torch.Tensor) -> torch.Tensor:
    """Mipnerf-360 distortion in normalized s-space, averaged over rays."""
    s = s_edges.to(weights.dtype)
    mids = 0.5 * (s[..., 1:] + s[..., :-1])
    widths = s[..., 1:] - s[..., :-1]
    pair = torch.abs(mids.unsqueeze(-1) - mids.unsqueeze(-2))
    inter = torch.einsum("bi,bij,bj->b", weights, pair, weights)
    intra = (weights ** 2 * widths).sum(-1) / 3.0
    return (inter + intra).mean()


def _searchsorted_clamped(edges: torch.Tensor, v: torch.Tensor):
    m = edges.shape[-1]
    lo = (torch.searchsorted(edges, v, right=True) - 1).clamp(0, m - 1)
    hi = torch.searchsorted(edges, v, right=False).clamp(0, m - 1)
    return lo, hi


def interlevel_loss(
    final_s: torch.Tensor, final_w: torch.Tensor, prop_hists: list
) -> torch.Tensor:
    """Proposal histograms must upper-bound the final weights on every interval.

    For each final interval the proposal mass of the smallest covering span is
    gathered; deficits are penalized quadratically (normalized by the final
    weight). Final weights are detached, so only the proposals receive
    gradient, as in the two-stage sampling recipe this follows.
    """
    fw = final_w.detach()
    fs = final_s.detach()
    total = fw.new_zeros(())
    for prop_s, prop_w in prop_hists:
        edges = prop_s.detach().to(fw.dtype).contiguous()
        cw = torch.cat(
            [prop_w.new_zeros(prop_w.shape[0], 1), torch.cumsum(prop_w, dim=1)], dim=1
        )
        lo, _ = _searchsorted_clamped(edges, fs[:, :-1].contiguous())
        _, hi = _searchsorted_clamped(edges, fs[:, 1:].contiguous())
        outer = torch.gather(cw, 1, hi) - torch.gather(cw, 1, lo)
        deficit = torch.clamp(fw - outer, min=0.0)
        total = total + (deficit ** 2 / torch.clamp(fw, min=1e-10)).sum(1).mean()
    return total


@dataclass(frozen=True)
class LossWeights:
    lambda_depth: float = 5e-4
    lambda_aug: float = 1.0
    lambda_dist: float = 0.005
    lambda_interlevel: float = 1.0
