"""Voxelization of accumulated Lidar points into a sparse occupancy grid.

Each occupied cell keeps the mean of the points that fell into it; those means
are the anchor positions the radiance field queries for Lidar features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import SceneBounds


@dataclass
class VoxelGrid:
    """Sparse voxel grid over the scene bounding cube.

    ``coords`` are integer cell coordinates of the occupied cells, sorted by
    linearized index so the layout is canonical regardless of input order.
    """

    resolution: int
    cell_size: float
    origin: np.ndarray
    coords: np.ndarray
    mean_positions: np.ndarray
    counts: np.ndarray

    def __len__(self) -> int:
        return self.coords.shape[0]

    def cell_centers(self) -> np.ndarray:
        return self.origin + (self.coords + 0.5) * self.cell_size

    def linear_keys(self) -> np.ndarray:
        r = self.resolution
        return (self.coords[:, 0] * r + self.coords[:, 1]) * r + self.coords[:, 2]


def voxelize(points: np.ndarray, resolution: int, bounds: SceneBounds) -> VoxelGrid:
    """Bin world points into a resolution^3 grid over the bounds cube.

    Points outside the cube are dropped. Returns occupied cells only, with
    per-cell mean positions and counts.
    """
    if resolution < 1:
        raise ValueError("resolution must be positive")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise ValueError("points contain non-finite values")
    origin = bounds.center - bounds.radius
    cell = 2.0 * bounds.radius / resolution
    idx = np.floor((pts - origin) / cell).astype(np.int64)
    inside = ((idx >= 0) & (idx < resolution)).all(axis=1)
    idx = idx[inside]
    pts = pts[inside]
    if idx.shape[0] == 0:
        empty3 = np.zeros((0, 3))
        return VoxelGrid(
            resolution, cell, origin,
            np.zeros((0, 3), dtype=np.int64), empty3, np.zeros(0, dtype=np.int64),
        )
    keys = (idx[:, 0] * resolution + idx[:, 1]) * resolution + idx[:, 2]
    uniq, inverse, counts = np.unique(keys, return_inverse=True, return_counts=True)
    sums = np.zeros((uniq.shape[0], 3))
    np.add.at(sums, inverse, pts)
    means = sums / counts[:, None]
    coords = np.stack(
        [uniq // (resolution * resolution),
         (uniq // resolution) % resolution,
         uniq % resolution],
        axis=1,
    )
    return VoxelGrid(resolution, cell, origin, coords, means, counts)
