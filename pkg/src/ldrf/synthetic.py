"""Procedural street-corridor scenes with analytic ground truth.

A camera drives forward past textured boxes (building fronts), spheres, and a
checkered ground plane under a fixed sun. Every surface color is a pure
function of the hit point, so images, depth maps, and simulated Lidar sweeps
all come from the same closed-form ray caster and agree exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import (
    LidarSweep,
    PinholeCamera,
    SE3Pose,
    pixel_grid,
    pixel_ray_directions,
)

_T_MIN = 1e-6


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    color_a: tuple
    color_b: tuple
    stripe_axis: int = 0
    stripe_period: float = 1.0


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    color_a: tuple
    color_b: tuple


@dataclass(frozen=True)
class SceneConfig:
    width: int = 160
    height: int = 120
    fov_deg: float = 70.0
    frames: int = 40
    frame_spacing: float = 0.45
    cam_height: float = 1.6
    pitch_deg: float = 8.0
    lateral_amp: float = 0.35
    lateral_period: float = 9.0
    lidar_azimuths: int = 480
    lidar_rings: int = 32
    lidar_el_lo_deg: float = -22.0
    lidar_el_hi_deg: float = 4.0
    lidar_range: float = 45.0
    lidar_noise: float = 0.02
    layout: str = "corridor"
    seed: int = 0
    ground_cell: float = 1.4
    timestamp_step: float = 0.1


@dataclass
class Scene:
    config: SceneConfig
    boxes: list = field(default_factory=list)
    spheres: list = field(default_factory=list)
    sun: np.ndarray = field(
        default_factory=lambda: np.array([0.35, 0.25, 0.9]) / np.linalg.norm([0.35, 0.25, 0.9])
    )

    # ---- geometry ------------------------------------------------------

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Closest-hit ray cast. Returns (t, rgb, hit) with t euclidean
        distance (dirs must be unit) and rgb already shaded; misses get sky."""
        o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
        d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
        n = o.shape[0]
        t_best = np.full(n, np.inf)
        albedo = np.zeros((n, 3))
        normal = np.zeros((n, 3))

        def consider(t, mask, alb, nrm):
            closer = mask & (t > _T_MIN) & (t < t_best)
            if not closer.any():
                return
            t_best[closer] = t[closer]
            albedo[closer] = alb[closer]
            normal[closer] = nrm[closer]

        # ground plane z = 0
        dz = d[:, 2]
        down = np.abs(dz) > 1e-12
        t_g = np.where(down, -o[:, 2] / np.where(down, dz, 1.0), np.inf)
        hit_pts = o + np.where(down, t_g, 0.0)[:, None] * d
        cell = self.config.ground_cell
        par = (
            np.floor(hit_pts[:, 0] / cell) + np.floor(hit_pts[:, 1] / cell)
        ).astype(np.int64) & 1
        g0 = np.array([0.42, 0.4, 0.38])
        g1 = np.array([0.16, 0.17, 0.2])
        tex = 0.8 + 0.2 * np.sin(hit_pts[:, 0] * 2.1) * np.sin(hit_pts[:, 1] * 3.3)
        g_alb = np.where(par[:, None] == 0, g0, g1) * tex[:, None]
        g_nrm = np.zeros((n, 3))
        g_nrm[:, 2] = 1.0
        consider(t_g, dz < 0, g_alb, g_nrm)

        for box in self.boxes:
            lo = np.asarray(box.lo)
            hi = np.asarray(box.hi)
            inv = np.where(np.abs(d) > 1e-12, 1.0 / np.where(d == 0, 1, d), np.inf)
            ta = (lo - o) * inv
            tb = (hi - o) * inv
            tmin = np.minimum(ta, tb)
            tmax = np.maximum(ta, tb)
            t_near = tmin.max(axis=1)
            t_far = tmax.min(axis=1)
            mask = (t_near <= t_far) & (t_far > _T_MIN)
            t_hit = np.where(t_near > _T_MIN, t_near, np.inf)
            pts = o + np.where(np.isfinite(t_hit), t_hit, 0.0)[:, None] * d
            axis = tmin.argmax(axis=1)
            nrm = np.zeros((n, 3))
            rows = np.arange(n)
            nrm[rows, axis] = -np.sign(d[rows, axis])
            stripes = np.floor(
                pts[:, box.stripe_axis] / box.stripe_period
            ).astype(np.int64) & 1
            alb = np.where(
                stripes[:, None] == 0, np.asarray(box.color_a), np.asarray(box.color_b)
            )
            consider(t_hit, mask, alb, nrm)

        for sph in self.spheres:
            c = np.asarray(sph.center)
            oc = o - c
            b = (oc * d).sum(axis=1)
            disc = b * b - ((oc * oc).sum(axis=1) - sph.radius ** 2)
            ok = disc > 0
            sq = np.sqrt(np.where(ok, disc, 0))
            t_hit = np.where(ok, -b - sq, np.inf)
            pts = o + np.where(np.isfinite(t_hit), t_hit, 0.0)[:, None] * d
            nrm = pts - c
            nn = np.linalg.norm(nrm, axis=1, keepdims=True)
            nrm = nrm / np.where(nn == 0, 1, nn)
            swirl = 0.5 + 0.5 * np.sin(6.0 * (pts[:, 2] - c[2]) + 3.0 * np.arctan2(
                pts[:, 1] - c[1], pts[:, 0] - c[0]))
            alb = np.asarray(sph.color_a) * swirl[:, None] + np.asarray(
                sph.color_b
            ) * (1 - swirl[:, None])
            consider(t_hit, ok, alb, nrm)

        hit = np.isfinite(t_best)
        shade = 0.55 + 0.45 * np.clip((normal * self.sun).sum(axis=1), 0.0, None)
        rgb = albedo * shade[:, None]
        # sky gradient for misses
        up = np.clip(d[:, 2], 0.0, 1.0)
        sky = np.array([0.74, 0.82, 0.94]) * (1 - up[:, None]) + np.array(
            [0.3, 0.5, 0.82]
        ) * up[:, None]
        rgb = np.where(hit[:, None], rgb, sky)
        t_out = np.where(hit, t_best, 0.0)
        return t_out, np.clip(rgb, 0.0, 1.0), hit

    # ---- cameras and sweeps -------------------------------------------

    def camera(self) -> PinholeCamera:
        cfg = self.config
        f = 0.5 * cfg.width / math.tan(math.radians(cfg.fov_deg) / 2)
        return PinholeCamera(
            fx=f, fy=f, cx=cfg.width / 2, cy=cfg.height / 2,
            width=cfg.width, height=cfg.height,
        )

    def pose(self, frame: int) -> SE3Pose:
        """World-from-camera pose of the given frame along the drive."""
        cfg = self.config
        x = frame * cfg.frame_spacing
        y = cfg.lateral_amp * math.sin(2 * math.pi * x / cfg.lateral_period)
        p = np.array([x, y, cfg.cam_height])
        th = math.radians(cfg.pitch_deg)
        cam_z = np.array([math.cos(th), 0.0, -math.sin(th)])
        cam_x = np.array([0.0, -1.0, 0.0])
        cam_y = np.cross(cam_z, cam_x)
        return SE3Pose(np.stack([cam_x, cam_y, cam_z], axis=1), p)

    def render_view(self, cam: PinholeCamera, pose: SE3Pose):
        """Returns (rgb (H, W, 3), depth (H, W)) with depth 0 at sky pixels."""
        px = pixel_grid(cam).reshape(-1, 2)
        d_cam = pixel_ray_directions(cam, px)
        d_world = d_cam @ pose.rotation.T
        o = np.broadcast_to(pose.translation, d_world.shape)
        t, rgb, _ = self.trace(o, d_world)
        return (
            rgb.reshape(cam.height, cam.width, 3),
            t.reshape(cam.height, cam.width).astype(np.float32),
        )

    def lidar_directions(self) -> np.ndarray:
        """Unit directions of one sweep in the sensor (camera) frame."""
        cfg = self.config
        az = np.arange(cfg.lidar_azimuths) * (2 * np.pi / cfg.lidar_azimuths)
        el = np.linspace(
            math.radians(cfg.lidar_el_lo_deg),
            math.radians(cfg.lidar_el_hi_deg),
            cfg.lidar_rings,
        )
        azg, elg = np.meshgrid(az, el)
        azg = azg.ravel()
        elg = elg.ravel()
        return np.stack(
            [np.cos(elg) * np.sin(azg), -np.sin(elg), np.cos(elg) * np.cos(azg)],
            axis=1,
        )

    def simulate_sweep(
        self, pose: SE3Pose, timestamp: float, rng: np.random.Generator
    ) -> LidarSweep:
        """Range-noised Lidar returns in the sensor frame; misses are dropped."""
        cfg = self.config
        d_world = self.lidar_directions() @ pose.rotation.T
        o = np.broadcast_to(pose.translation, d_world.shape)
        t, _, hit = self.trace(o, d_world)
        keep = hit & (t <= cfg.lidar_range)
        t = t[keep] + rng.normal(0.0, cfg.lidar_noise, int(keep.sum()))
        pts_world = pose.translation + t[:, None] * d_world[keep]
        world_to_cam = pose.inverse()
        return LidarSweep(points=world_to_cam.apply(pts_world), timestamp=timestamp)


def _palette(rng: np.random.Generator) -> tuple:
    base = rng.uniform(0.25, 0.95, 3)
    other = np.clip(1.1 - base + rng.uniform(-0.15, 0.15, 3), 0.05, 1.0)
    return tuple(base), tuple(other)


def build_scene(config: SceneConfig) -> Scene:
    """Deterministic procedural layout for the named preset."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, 0xC0FFEE)))
    scene = Scene(config=config)
    drive = config.frames * config.frame_spacing
    if config.layout not in ("corridor", "occluder"):
        raise ValueError(f"unknown layout {config.layout!r}")
    x = 2.0
    side = 1
    while x < drive + 16.0:
        depth = rng.uniform(2.0, 4.5)
        width_x = rng.uniform(2.5, 5.0)
        height = rng.uniform(2.0, 6.0)
        y0 = rng.uniform(4.5, 7.0) * side
        ca, cb = _palette(rng)
        lo = (x, min(y0, y0 + depth * side), 0.0)
        hi = (x + width_x, max(y0, y0 + depth * side), height)
        scene.boxes.append(
            Box(lo=lo, hi=hi, color_a=ca, color_b=cb,
                stripe_axis=int(rng.integers(0, 3)),
                stripe_period=float(rng.uniform(0.6, 1.6)))
        )
        x += width_x + rng.uniform(0.5, 2.5)
        side = -side
    for _ in range(3):
        cx = rng.uniform(3.0, drive + 3.0)
        cy = rng.uniform(-3.5, 3.5)
        r = rng.uniform(0.5, 1.1)
        ca, cb = _palette(rng)
        scene.spheres.append(Sphere(center=(cx, cy, r), radius=r, color_a=ca, color_b=cb))
    if config.layout == "occluder":
        # one deep foreground slab beside the path; sweeps taken past it scan
        # the surfaces it hides from earlier views, so plain accumulation
        # projects those returns straight through the slab silhouette
        ca, cb = _palette(rng)
        x0 = 0.35 * drive
        scene.boxes.append(
            Box(lo=(x0, 1.3, 0.0), hi=(x0 + 0.25 * drive, 3.6, 2.9),
                color_a=ca, color_b=cb, stripe_axis=0, stripe_period=0.9)
        )
        # a wall closing the corridor keeps every forward ray finite, which
        # bounds the depth range the fields must resolve
        ca, cb = _palette(rng)
        scene.boxes.append(
            Box(lo=(drive + 5.5, -9.0, 0.0), hi=(drive + 7.0, 9.0, 5.0),
                color_a=ca, color_b=cb, stripe_axis=1, stripe_period=1.2)
        )
    return scene
