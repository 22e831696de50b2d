"""Projecting accumulated Lidar into views: sparse depth maps, visibility
filtering, and synthetically augmented training views.

Rasterization is point-wise (one pixel per point, nearest point wins); no
splatting. Depth values are euclidean distance from the camera center along
the pixel ray, the convention every depth consumer in the package shares.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from .geometry import PinholeCamera, SE3Pose, project_many


@dataclass
class SparseDepthMap:
    """(H, W) depth with 0 marking empty pixels, plus optional per-pixel color."""

    depth: np.ndarray
    rgb: np.ndarray | None = None

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def rasterize_depth(
    points_world: np.ndarray,
    cam: PinholeCamera,
    world_to_cam: SE3Pose,
    colors: np.ndarray | None = None,
) -> SparseDepthMap:
    """Z-buffer the points into a sparse depth (and color) map.

    Ties on identical distance resolve to the earlier point in the input
    array, so the output is deterministic for any fixed input order.
    """
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    uv, _, valid = project_many(cam, world_to_cam, pts)
    depth = np.zeros((cam.height, cam.width), dtype=np.float64)
    rgb = None
    if colors is not None:
        colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
        if colors.shape[0] != pts.shape[0]:
            raise ValueError("colors and points disagree on count")
        rgb = np.zeros((cam.height, cam.width, 3), dtype=np.float64)
    if not valid.any():
        return SparseDepthMap(depth.astype(np.float32),
                              None if rgb is None else rgb.astype(np.float32))
    idx = np.flatnonzero(valid)
    cam_pts = world_to_cam.apply(pts[idx])
    dist = np.linalg.norm(cam_pts, axis=1)
    px = np.floor(uv[idx, 0]).astype(np.int64)
    py = np.floor(uv[idx, 1]).astype(np.int64)
    flat = py * cam.width + px
    order = np.lexsort((idx, dist, flat))
    flat = flat[order]
    first = np.ones(flat.shape[0], dtype=bool)
    first[1:] = flat[1:] != flat[:-1]
    win = order[first]
    depth.reshape(-1)[flat[first]] = dist[win]
    if rgb is not None:
        rgb.reshape(-1, 3)[flat[first]] = colors[idx[win]]
    return SparseDepthMap(depth.astype(np.float32),
                          None if rgb is None else rgb.astype(np.float32))


def hidden_point_removal(
    points: np.ndarray, viewpoint: np.ndarray, gamma: float = 2.0
) -> np.ndarray:
    """Indices of points visible from the viewpoint via spherical flipping.

    Each point q (relative to the viewpoint) maps to q * (2 R_f / ||q|| - 1)
    with R_f = 10^gamma * max ||q||; points on the convex hull of the flipped
    set united with the viewpoint itself are visible. Degenerate inputs
    (fewer than four points, or a coplanar set) count everything as visible.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    vp = np.asarray(viewpoint, dtype=np.float64).reshape(3)
    n = pts.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    q = pts - vp
    norms = np.linalg.norm(q, axis=1)
    if norms.min() < 1e-9:
        raise ValueError("a point coincides with the viewpoint")
    if n < 4:
        return np.arange(n)
    r_f = (10.0 ** gamma) * norms.max()
    flipped = q * (2.0 * r_f / norms - 1.0)[:, None]
    cloud = np.vstack([flipped, np.zeros(3)])
    try:
        hull = ConvexHull(cloud)
    except QhullError:
        return np.arange(n)
    visible = hull.vertices[hull.vertices < n]
    return np.sort(visible)


def perturb_pose(pose: SE3Pose, sigma: float, rng: np.random.Generator) -> SE3Pose:
    """Gaussian-perturb the translation only; the rotation is kept exactly."""
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    return SE3Pose(pose.rotation.copy(), pose.translation + rng.normal(0.0, sigma, 3))


@dataclass
class AugmentedView:
    """A synthetic training view rasterized from colorized Lidar points.

    ``pose`` is world-from-camera for the perturbed view. Pixels with no
    projected point are invalid (mask False) and excluded from training.
    """

    pose: SE3Pose
    base_index: int
    rgb: np.ndarray
    depth: np.ndarray
    sigma: float

    @property
    def valid(self) -> np.ndarray:
        return self.depth > 0


def generate_augmented_views(
    points_world: np.ndarray,
    colors: np.ndarray,
    cam: PinholeCamera,
    base_poses: list[SE3Pose],
    count: int,
    sigma: float,
    rng: np.random.Generator,
) -> list[AugmentedView]:
    """Rasterize the colorized cloud from ``count`` perturbed camera poses.

    Base views are cycled round-robin; each pick perturbs the camera center by
    an isotropic Gaussian of scale sigma and keeps the orientation.
    """
    if count < 0:
        raise ValueError("count must be non-negative")
    if not base_poses and count > 0:
        raise ValueError("need at least one base pose")
    views = []
    for i in range(count):
        base = base_poses[i % len(base_poses)]
        pose = perturb_pose(base, sigma, rng)
        sd = rasterize_depth(points_world, cam, pose.inverse(), colors)
        views.append(
            AugmentedView(
                pose=pose, base_index=i % len(base_poses),
                rgb=sd.rgb, depth=sd.depth, sigma=sigma,
            )
        )
    return views
