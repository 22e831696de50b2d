"""Rigid transforms, pinhole cameras, Lidar sweeps, and scene normalization.

Conventions used throughout the package:
  * poses are world-from-camera unless a name says otherwise; ``project`` and
    friends take the inverse (world-to-camera) mapping explicitly,
  * pixel (i, j) covers the unit square whose center sits at continuous image
    coordinates (i + 0.5, j + 0.5), with u along width and v along height,
  * ``project`` reports camera-frame z depth; euclidean distance along the ray
    is a separate quantity handled at the depth-map boundary,
  * geometry math runs in float64; file formats quantize to float32.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

_ROT_TOL = 1e-6


def _check_rotation(rotation: np.ndarray, tol: float) -> None:
    err = np.abs(rotation @ rotation.T - np.eye(3)).max()
    if err > tol:
        raise ValueError(f"rotation is not orthonormal (max deviation {err:.3e})")
    det = np.linalg.det(rotation)
    if abs(det - 1.0) > max(tol, 1e-6):
        raise ValueError(f"rotation determinant {det:.6f} != 1 (reflection or scale)")


@dataclass(frozen=True)
class SE3Pose:
    """Rigid transform y = R x + t with R in SO(3)."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValueError("pose contains non-finite values")
        _check_rotation(rot, _ROT_TOL)
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @staticmethod
    def identity() -> "SE3Pose":
        return SE3Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_matrix(matrix: np.ndarray, tol: float = 1e-4) -> "SE3Pose":
        """Build from a 4x4 row-major matrix, re-orthonormalizing mild drift.

        Rotations off SO(3) by more than ``tol`` are rejected; smaller drift is
        snapped back via SVD with a warning. A negative determinant is always
        an error (reflections are never valid extrinsics).
        """
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"pose matrix must be 4x4, got {m.shape}")
        if not np.isfinite(m).all():
            raise ValueError("pose matrix contains non-finite values")
        if np.abs(m[3] - np.array([0.0, 0.0, 0.0, 1.0])).max() > 1e-6:
            raise ValueError("pose matrix bottom row must be [0, 0, 0, 1]")
        rot = m[:3, :3]
        det = np.linalg.det(rot)
        if det <= 0:
            raise ValueError(f"pose rotation determinant {det:.6f} <= 0")
        err = np.abs(rot @ rot.T - np.eye(3)).max()
        if err > tol:
            raise ValueError(f"pose rotation off SO(3) by {err:.3e} (tol {tol:.1e})")
        if err > _ROT_TOL:
            u, _, vt = np.linalg.svd(rot)
            rot = u @ vt
            if np.linalg.det(rot) < 0:
                raise ValueError("pose rotation projects onto a reflection")
            warnings.warn(
                f"re-orthonormalized pose rotation (deviation {err:.3e})",
                stacklevel=2,
            )
        return SE3Pose(rot, m[:3, 3])

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform one (3,) point or an (N, 3) batch."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "SE3Pose":
        rot_inv = self.rotation.T
        return SE3Pose(rot_inv, -rot_inv @ self.translation)

    def compose(self, other: "SE3Pose") -> "SE3Pose":
        """Return self o other, i.e. the transform x -> self(other(x))."""
        return SE3Pose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")
        if not all(np.isfinite([self.fx, self.fy, self.cx, self.cy])):
            raise ValueError("intrinsics must be finite")


@dataclass
class LidarSweep:
    """One Lidar capture in its sensor frame (here: the rigidly attached camera frame)."""

    points: np.ndarray
    timestamp: float
    rgb: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.isfinite(self.points).all():
            raise ValueError("sweep contains non-finite points")
        if self.rgb is not None:
            self.rgb = np.asarray(self.rgb, dtype=np.float64).reshape(-1, 3)
            if self.rgb.shape[0] != self.points.shape[0]:
                raise ValueError("rgb count does not match point count")


@dataclass(frozen=True)
class SceneBounds:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).reshape(3)
        if not np.isfinite(center).all():
            raise ValueError("bounds center must be finite")
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ValueError("bounds radius must be positive and finite")
        object.__setattr__(self, "center", center)


def project(cam: PinholeCamera, world_to_cam: SE3Pose, point_world: np.ndarray):
    """Project one world point. Returns (pixel (2,), z_depth) or None.

    None means the point is behind the camera or lands outside the image.
    Non-finite input is rejected with a ValueError.
    """
    p = np.asarray(point_world, dtype=np.float64).reshape(3)
    if not np.isfinite(p).all():
        raise ValueError("cannot project a non-finite point")
    pc = world_to_cam.apply(p)
    if pc[2] <= 0:
        return None
    u = cam.fx * pc[0] / pc[2] + cam.cx
    v = cam.fy * pc[1] / pc[2] + cam.cy
    if not (0.0 <= u < cam.width and 0.0 <= v < cam.height):
        return None
    return np.array([u, v]), float(pc[2])


def project_many(cam: PinholeCamera, world_to_cam: SE3Pose, points_world: np.ndarray):
    """Vectorized projection. Returns (uv (N, 2), z (N,), valid (N,) bool).

    uv and z are meaningful only where valid is True.
    """
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)
    if not np.isfinite(pts).all():
        raise ValueError("cannot project non-finite points")
    pc = world_to_cam.apply(pts)
    z = pc[:, 2]
    in_front = z > 0
    zs = np.where(in_front, z, 1.0)
    u = cam.fx * pc[:, 0] / zs + cam.cx
    v = cam.fy * pc[:, 1] / zs + cam.cy
    valid = in_front & (u >= 0.0) & (u < cam.width) & (v >= 0.0) & (v < cam.height)
    return np.stack([u, v], axis=1), z, valid


def unproject(cam: PinholeCamera, pixel: np.ndarray, z_depth) -> np.ndarray:
    """Lift continuous pixel coordinates at camera-frame z depth to the camera frame."""
    z = np.asarray(z_depth, dtype=np.float64)
    if np.any(z <= 0) or not np.isfinite(z).all():
        raise ValueError("unproject requires positive finite depth")
    px = np.asarray(pixel, dtype=np.float64)
    u = px[..., 0]
    v = px[..., 1]
    x = (u - cam.cx) / cam.fx * z
    y = (v - cam.cy) / cam.fy * z
    return np.stack([x, y, z], axis=-1)


def pixel_ray_directions(cam: PinholeCamera, pixels: np.ndarray) -> np.ndarray:
    """Unit camera-frame ray directions through continuous pixel coordinates."""
    px = np.asarray(pixels, dtype=np.float64)
    d = np.stack(
        [
            (px[..., 0] - cam.cx) / cam.fx,
            (px[..., 1] - cam.cy) / cam.fy,
            np.ones(px.shape[:-1]),
        ],
        axis=-1,
    )
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_scale_factors(cam: PinholeCamera, pixels: np.ndarray) -> np.ndarray:
    """Euclidean distance along the pixel ray per unit of camera z depth."""
    px = np.asarray(pixels, dtype=np.float64)
    dx = (px[..., 0] - cam.cx) / cam.fx
    dy = (px[..., 1] - cam.cy) / cam.fy
    return np.sqrt(dx * dx + dy * dy + 1.0)


def pixel_grid(cam: PinholeCamera) -> np.ndarray:
    """(H, W, 2) continuous coordinates of every pixel center."""
    u = np.arange(cam.width, dtype=np.float64) + 0.5
    v = np.arange(cam.height, dtype=np.float64) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([uu, vv], axis=-1)


def select_window(timestamps, reference: int, window) -> np.ndarray:
    """Indices of the ``window`` temporally nearest frames around a reference frame.

    Ties in temporal distance break toward the earlier frame. ``window`` of
    None (or >= the frame count) selects everything. The result is sorted.
    """
    ts = np.asarray(timestamps, dtype=np.float64)
    n = ts.shape[0]
    if not 0 <= reference < n:
        raise ValueError(f"reference frame {reference} out of range [0, {n})")
    if window is None or window >= n:
        return np.arange(n)
    if window < 1:
        raise ValueError("window must be at least 1")
    dist = np.abs(ts - ts[reference])
    order = np.lexsort((ts, dist))
    return np.sort(order[:window])


def accumulate(
    sweeps: list[LidarSweep],
    poses: list[SE3Pose],
    window=None,
    reference: int = 0,
) -> np.ndarray:
    """Merge the selected sweeps into one world-frame (N, 3) point array.

    ``poses`` are world-from-sensor. Selection is temporal (see
    ``select_window``), so the output point set does not depend on list order
    as long as ``reference`` names the same frame.
    """
    if len(sweeps) != len(poses):
        raise ValueError(f"{len(sweeps)} sweeps but {len(poses)} poses")
    if not sweeps:
        return np.zeros((0, 3))
    idx = select_window([s.timestamp for s in sweeps], reference, window)
    parts = [poses[i].apply(sweeps[i].points) for i in idx]
    return np.concatenate(parts, axis=0) if parts else np.zeros((0, 3))


def colorize(
    points_world: np.ndarray,
    image: np.ndarray,
    cam: PinholeCamera,
    world_to_cam: SE3Pose,
):
    """Attach bilinearly sampled image colors to the points visible in the view.

    Returns (points (M, 3), colors (M, 3)) keeping only points that project
    inside the image with positive depth. ``image`` is (H, W, 3) float in [0, 1].
    """
    img = np.asarray(image, dtype=np.float64)
    if img.shape[:2] != (cam.height, cam.width):
        raise ValueError(
            f"image shape {img.shape[:2]} does not match camera "
            f"({cam.height}, {cam.width})"
        )
    uv, _, valid = project_many(cam, world_to_cam, points_world)
    pts = np.asarray(points_world, dtype=np.float64).reshape(-1, 3)[valid]
    colors = sample_bilinear(img, uv[valid])
    return pts, colors


def sample_bilinear(image: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Bilinear interpolation at continuous image coordinates.

    Pixel centers sit at (i + 0.5, j + 0.5); coordinates within the half-pixel
    border clamp to the edge pixels.
    """
    h, w = image.shape[:2]
    x = np.asarray(uv, dtype=np.float64)[..., 0] - 0.5
    y = np.asarray(uv, dtype=np.float64)[..., 1] - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    x0c = np.clip(x0, 0, w - 1)
    x1c = np.clip(x0 + 1, 0, w - 1)
    y0c = np.clip(y0, 0, h - 1)
    y1c = np.clip(y0 + 1, 0, h - 1)
    fx = fx[..., None]
    fy = fy[..., None]
    top = image[y0c, x0c] * (1 - fx) + image[y0c, x1c] * fx
    bot = image[y1c, x0c] * (1 - fx) + image[y1c, x1c] * fx
    return top * (1 - fy) + bot * fy


def normalize_scene(positions: np.ndarray) -> SceneBounds:
    """Bound a scene from its camera positions.

    The scene diameter is the maximum pairwise camera distance plus 50 m of
    margin (25 m of reach past either extreme); the center is the midpoint of
    the maximizing pair. A single camera yields radius 25.
    """
    pos = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if pos.shape[0] == 0:
        raise ValueError("normalize_scene needs at least one position")
    if not np.isfinite(pos).all():
        raise ValueError("positions contain non-finite values")
    if pos.shape[0] == 1:
        return SceneBounds(pos[0].copy(), 25.0)
    diff = pos[:, None, :] - pos[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    i, j = np.unravel_index(np.argmax(d2), d2.shape)
    dmax = float(np.sqrt(d2[i, j]))
    center = 0.5 * (pos[i] + pos[j])
    return SceneBounds(center, (dmax + 50.0) / 2.0)


def contract(points: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    """Map unbounded world points into the radius-2 contraction ball.

    Inside the unit ball (after centering and scaling by ``bounds.radius``)
    the map is the identity; outside, norms map to 2 - 1/n, so the image of
    all of space has norm < 2.
    """
    u = (np.asarray(points, dtype=np.float64) - bounds.center) / bounds.radius
    n = np.linalg.norm(u, axis=-1, keepdims=True)
    safe = np.maximum(n, 1e-12)
    return np.where(n <= 1.0, u, (2.0 - 1.0 / safe) * (u / safe))


def contract_to_unit_cube(points: np.ndarray, bounds: SceneBounds) -> np.ndarray:
    """Contract and affinely remap the radius-2 ball into [0, 1]^3 for hashing."""
    return (contract(points, bounds) + 2.0) / 4.0
