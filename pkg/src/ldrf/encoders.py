"""Per-voxel Lidar feature encoders.

Both encoders turn a sparse ``VoxelGrid`` into one feature vector per occupied
cell. The MLP variant looks at each cell in isolation; the sparse convolution
variant mixes information across the 3x3x3 cell neighborhood (absent neighbors
contribute zeros) and is the stronger of the two. The convolution input is the
point mean relative to the cell center, never the absolute cell coordinate, so
shifting the whole cloud by an integer number of cells shifts the features
with it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .nets import Mlp, _uniform_param
from .voxel import VoxelGrid


@dataclass
class LidarEmbeddingSet:
    """Anchor positions (M, 3) with their learned features (M, n) torch tensor."""

    positions: np.ndarray
    features: torch.Tensor

    def __post_init__(self):
        if self.positions.shape[0] != self.features.shape[0]:
            raise ValueError("positions and features disagree on point count")


class MlpPointEncoder(nn.Module):
    """Encode each occupied cell from its local statistics alone.

    Input per cell: the mean position relative to the cell center (scaled by
    the cell size into [-0.5, 0.5]) and the cell coordinate normalized by the
    grid resolution.
    """

    in_dim = 6

    def __init__(
        self,
        rng: np.random.Generator,
        feature_dim: int = 16,
        hidden: tuple[int, ...] = (64, 96, 128),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        self.net = Mlp(self.in_dim, hidden, feature_dim, rng, dtype=dtype)

    def cell_inputs(self, grid: VoxelGrid, dtype: torch.dtype) -> torch.Tensor:
        rel = (grid.mean_positions - grid.cell_centers()) / grid.cell_size
        norm_coord = grid.coords.astype(np.float64) / grid.resolution
        x = np.concatenate([rel, norm_coord], axis=1)
        return torch.as_tensor(x, dtype=dtype)

    def forward(self, grid: VoxelGrid) -> torch.Tensor:
        w = self.net.weights[0]
        return self.net(self.cell_inputs(grid, w.dtype))

    def encode(self, grid: VoxelGrid) -> LidarEmbeddingSet:
        return LidarEmbeddingSet(grid.mean_positions.copy(), self.forward(grid))


def neighbor_table(grid: VoxelGrid) -> np.ndarray:
    """(M, 27) indices into the grid's cells for each 3x3x3 neighborhood.

    Entry -1 marks an absent neighbor. Offsets enumerate dz fastest, matching
    the kernel tap layout of SparseConv3d.
    """
    r = grid.resolution
    keys = grid.linear_keys()
    offsets = np.array(
        [[dx, dy, dz] for dx in (-1, 0, 1) for dy in (-1, 0, 1) for dz in (-1, 0, 1)],
        dtype=np.int64,
    )
    neigh = grid.coords[:, None, :] + offsets[None, :, :]  # (M, 27, 3)
    inside = ((neigh >= 0) & (neigh < r)).all(axis=2)
    nkeys = (neigh[:, :, 0] * r + neigh[:, :, 1]) * r + neigh[:, :, 2]
    slot = np.searchsorted(keys, nkeys)
    slot_ok = inside & (slot < keys.shape[0])
    found = np.zeros(nkeys.shape, dtype=bool)
    found[slot_ok] = keys[slot[slot_ok]] == nkeys[slot_ok]
    table = np.where(found, slot, -1)
    return table


class SparseConv3d(nn.Module):
    """One 3x3x3 submanifold convolution over occupied cells.

    Computes outputs only at occupied cells; absent neighbors contribute zero
    feature vectors. Weight layout is (27, in_dim, out_dim) with taps ordered
    like ``neighbor_table``.
    """

    def __init__(
        self, in_dim: int, out_dim: int, rng: np.random.Generator,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        bound = 1.0 / np.sqrt(in_dim * 27)
        self.weight = _uniform_param(rng, (27, in_dim, out_dim), bound, dtype)
        self.bias = _uniform_param(rng, (out_dim,), bound, dtype)
        self.in_dim = in_dim
        self.out_dim = out_dim

    def forward(self, feats: torch.Tensor, neighbors: torch.Tensor) -> torch.Tensor:
        padded = torch.cat([feats, feats.new_zeros(1, feats.shape[1])], dim=0)
        idx = torch.where(neighbors >= 0, neighbors, feats.shape[0])
        gathered = padded.index_select(0, idx.reshape(-1)).view(
            idx.shape[0], 27 * self.in_dim
        )
        w = self.weight.view(27 * self.in_dim, self.out_dim)
        return gathered @ w + self.bias


class SparseConvEncoder(nn.Module):
    """Stack of submanifold convolutions with a linear skip from the raw input.

    Input per cell is the mean position relative to the cell center (scaled by
    cell size); the normalized absolute coordinate is deliberately excluded to
    keep the encoder equivariant to integer-cell translations.
    """

    in_dim = 3

    def __init__(
        self,
        rng: np.random.Generator,
        feature_dim: int = 16,
        hidden: tuple[int, ...] = (32, 32),
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        self.feature_dim = feature_dim
        widths = [self.in_dim, *hidden, feature_dim]
        self.convs = nn.ModuleList(
            [
                SparseConv3d(a, b, rng, dtype=dtype)
                for a, b in zip(widths[:-1], widths[1:])
            ]
        )
        bound = 1.0 / np.sqrt(self.in_dim)
        self.skip_weight = _uniform_param(rng, (self.in_dim, feature_dim), bound, dtype)

    def cell_inputs(self, grid: VoxelGrid, dtype: torch.dtype) -> torch.Tensor:
        rel = (grid.mean_positions - grid.cell_centers()) / grid.cell_size
        return torch.as_tensor(rel, dtype=dtype)

    def forward(self, grid: VoxelGrid) -> torch.Tensor:
        dtype = self.skip_weight.dtype
        x = self.cell_inputs(grid, dtype)
        neighbors = torch.as_tensor(neighbor_table(grid))
        h = x
        for conv in self.convs:
            h = torch.relu(conv(h, neighbors))
        return h + x @ self.skip_weight

    def encode(self, grid: VoxelGrid) -> LidarEmbeddingSet:
        return LidarEmbeddingSet(grid.mean_positions.copy(), self.forward(grid))


def make_encoder(kind: str, rng: np.random.Generator, feature_dim: int = 16):
    """Factory for the encoder ablations. ``none`` yields no encoder."""
    if kind == "none":
        return None
    if kind == "mlp":
        return MlpPointEncoder(rng, feature_dim=feature_dim)
    if kind == "sparse_conv":
        return SparseConvEncoder(rng, feature_dim=feature_dim)
    raise ValueError(f"unknown encoder kind {kind!r}")
