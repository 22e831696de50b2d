"""Small neural building blocks: MLPs, multiresolution hash encoding, and
spherical harmonics. All parameter initialization draws from a caller-supplied
numpy Generator so runs are reproducible independent of torch's global RNG.
"""

from __future__ import annotations

import warnings

import numpy as np
import torch
from torch import nn

HASH_PRIMES = (1, 2654435761, 805459861)


def _uniform_param(rng: np.random.Generator, shape, bound: float, dtype) -> nn.Parameter:
    data = rng.uniform(-bound, bound, size=shape)
    return nn.Parameter(torch.as_tensor(data, dtype=dtype))


class Mlp(nn.Module):
    """Plain fully connected network with ReLU hidden activations."""

    def __init__(
        self,
        in_dim: int,
        hidden: tuple[int, ...],
        out_dim: int,
        rng: np.random.Generator,
        out_activation: str | None = None,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if in_dim < 1 or out_dim < 1:
            raise ValueError("layer widths must be positive")
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.out_activation = out_activation
        widths = [in_dim, *hidden, out_dim]
        weights = []
        biases = []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(_uniform_param(rng, (fan_out, fan_in), bound, dtype))
            biases.append(_uniform_param(rng, (fan_out,), bound, dtype))
        self.weights = nn.ParameterList(weights)
        self.biases = nn.ParameterList(biases)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"expected input width {self.in_dim}, got {x.shape[-1]}")
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = torch.nn.functional.linear(h, w, b)
            if i < last:
                h = torch.relu(h)
        if self.out_activation == "sigmoid":
            h = torch.sigmoid(h)
        elif self.out_activation == "relu":
            h = torch.relu(h)
        elif self.out_activation is not None:
            raise ValueError(f"unknown output activation {self.out_activation!r}")
        return h

    def backward_from(self, x: torch.Tensor, grad_out: torch.Tensor):
        """Exact gradients of forward at x against grad_out.

        Returns (grad_x, {param_name: grad}). A convenience wrapper over
        autograd used by the finite-difference harness and a few tests.
        """
        x = x.detach().requires_grad_(True)
        y = self.forward(x)
        params = dict(self.named_parameters())
        grads = torch.autograd.grad(y, [x, *params.values()], grad_outputs=grad_out)
        return grads[0], dict(zip(params.keys(), grads[1:]))


def hash_level_resolutions(levels: int, min_res: int, max_res: int) -> np.ndarray:
    """Per-level grid resolutions on a geometric progression from min to max."""
    if levels < 1:
        raise ValueError("need at least one level")
    if min_res < 1 or max_res < min_res:
        raise ValueError("resolutions must satisfy 1 <= min <= max")
    if levels == 1:
        return np.array([min_res], dtype=np.int64)
    growth = np.exp((np.log(max_res) - np.log(min_res)) / (levels - 1))
    res = np.floor(min_res * growth ** np.arange(levels)).astype(np.int64)
    return res


class HashEncoding(nn.Module):
    """Multiresolution hash table encoding of points in [0, 1]^3.

    Every level scales the input to its grid resolution, hashes the 8
    surrounding corners with a 3-prime XOR hash into a table of size
    ``table_size`` (a power of two), and interpolates the stored feature
    vectors trilinearly. Collisions are resolved implicitly by gradient
    averaging, by design.
    """

    def __init__(
        self,
        rng: np.random.Generator,
        levels: int = 16,
        features_per_level: int = 2,
        min_res: int = 16,
        max_res: int = 4096,
        table_size: int = 2 ** 15,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if table_size < 2 or table_size & (table_size - 1):
            raise ValueError("table_size must be a power of two")
        self.levels = levels
        self.features_per_level = features_per_level
        self.table_size = table_size
        self.out_dim = levels * features_per_level
        res = hash_level_resolutions(levels, min_res, max_res)
        self.register_buffer("resolutions", torch.as_tensor(res), persistent=False)
        corner = torch.tensor(
            [[i >> 2 & 1, i >> 1 & 1, i & 1] for i in range(8)], dtype=torch.int64
        )
        self.register_buffer("corners", corner, persistent=False)
        self.register_buffer(
            "level_offsets",
            torch.arange(levels, dtype=torch.int64) * table_size,
            persistent=False,
        )
        self.table = _uniform_param(
            rng, (levels * table_size, features_per_level), 1e-4, dtype
        )

    def hash_corner(self, coords: torch.Tensor) -> torch.Tensor:
        """XOR spatial hash of integer coordinates (..., 3) into [0, table_size)."""
        h = (
            coords[..., 0] * HASH_PRIMES[0]
            ^ coords[..., 1] * HASH_PRIMES[1]
            ^ coords[..., 2] * HASH_PRIMES[2]
        )
        return h & (self.table_size - 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Encode (N, 3) points in [0, 1]^3 into (N, levels * features)."""
        if x.shape[-1] != 3:
            raise ValueError("expected (..., 3) input")
        res = self.resolutions.to(x.dtype)
        pos = x.unsqueeze(-2) * res.unsqueeze(-1)  # (N, L, 3)
        base = torch.floor(pos)
        frac = pos - base
        corner = base.long().unsqueeze(-2) + self.corners  # (N, L, 8, 3)
        idx = self.hash_corner(corner) + self.level_offsets.unsqueeze(-1)
        feats = self.table.index_select(0, idx.reshape(-1))
        feats = feats.view(*idx.shape, self.features_per_level)
        w = torch.where(
            self.corners.bool(), frac.unsqueeze(-2), 1.0 - frac.unsqueeze(-2)
        ).prod(-1)
        out = (feats * w.unsqueeze(-1)).sum(-2)  # (N, L, F)
        return out.reshape(*x.shape[:-1], self.out_dim)


SH_DEGREE = 4
SH_DIM = SH_DEGREE * SH_DEGREE


def spherical_harmonics(directions: torch.Tensor) -> torch.Tensor:
    """Real spherical harmonics basis up to degree 4 (16 components).

    Directions are normalized internally; a deviation above 1e-3 warns, a norm
    below 1e-6 is an error. Constants follow the standard real SH convention.
    """
    n = torch.linalg.vector_norm(directions, dim=-1, keepdim=True)
    if bool((n < 1e-6).any()):
        raise ValueError("direction norm below 1e-6")
    if bool((torch.abs(n - 1.0) > 1e-3).any()):
        warnings.warn("normalizing non-unit directions for SH evaluation", stacklevel=2)
    d = directions / n
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    comps = [
        torch.full_like(x, 0.28209479177387814),
        -0.48860251190291987 * y,
        0.48860251190291987 * z,
        -0.48860251190291987 * x,
        1.0925484305920792 * xy,
        -1.0925484305920792 * yz,
        0.94617469575755997 * zz - 0.31539156525251999,
        -1.0925484305920792 * xz,
        0.54627421529603959 * (xx - yy),
        0.59004358992664352 * y * (-3.0 * xx + yy),
        2.8906114426405538 * xy * z,
        0.45704579946446572 * y * (1.0 - 5.0 * zz),
        0.37317633259011546 * z * (5.0 * zz - 3.0),
        0.45704579946446572 * x * (1.0 - 5.0 * zz),
        1.4453057213202769 * z * (xx - yy),
        0.59004358992664352 * x * (-xx + 3.0 * yy),
    ]
    return torch.stack(comps, dim=-1)


def cast_module(module: nn.Module, dtype: torch.dtype) -> nn.Module:
    """Deep-copy a module with parameters cast to dtype (for f64 FD oracles)."""
    import copy

    clone = copy.deepcopy(module)
    return clone.to(dtype)
