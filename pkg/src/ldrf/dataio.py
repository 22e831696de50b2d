"""On-disk dataset layout and binary formats.

Manifest: JSON, format tag ``ldrf-manifest/1``, one shared pinhole intrinsics
block and a frame list of {image, pose (4x4 row-major world-from-camera),
lidar, optional mask, optional depth, timestamp}.

Depth maps (``LDRF-D1``): magic, u32le width/height, row-major float32le
euclidean ray distances, 0 marking invalid pixels.

Point clouds (``LDRF-P1``): magic, u8 flags (bit0: rgb present), u32le count,
float32le xyz triples, then float32le rgb triples when flagged.

Masks: single-channel PNG, 255 = dynamic (excluded from supervision).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import LidarSweep, PinholeCamera, SE3Pose

DEPTH_MAGIC = b"LDRF-D1\x00"
POINTS_MAGIC = b"LDRF-P1\x00"
MANIFEST_FORMAT = "ldrf-manifest/1"


def save_depth(path, depth: np.ndarray) -> None:
    d = np.asarray(depth, dtype=np.float32)
    if d.ndim != 2:
        raise ValueError("depth must be 2-D")
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(struct.pack("<II", d.shape[1], d.shape[0]))
        f.write(np.ascontiguousarray(d, dtype="<f4").tobytes())


def load_depth(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:8] != DEPTH_MAGIC:
        raise ValueError(f"{path}: not a depth map file")
    w, h = struct.unpack_from("<II", data, 8)
    need = 16 + 4 * w * h
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f4", count=w * h, offset=16).reshape(h, w).copy()


def save_points(path, points: np.ndarray, rgb: np.ndarray | None = None) -> None:
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    flags = 1 if rgb is not None else 0
    with open(path, "wb") as f:
        f.write(POINTS_MAGIC)
        f.write(struct.pack("<BI", flags, pts.shape[0]))
        f.write(np.ascontiguousarray(pts, dtype="<f4").tobytes())
        if rgb is not None:
            c = np.asarray(rgb, dtype=np.float32).reshape(-1, 3)
            if c.shape[0] != pts.shape[0]:
                raise ValueError("rgb count does not match point count")
            f.write(np.ascontiguousarray(c, dtype="<f4").tobytes())


def load_points(path):
    """Returns (points (N, 3) f32, rgb (N, 3) f32 or None)."""
    data = Path(path).read_bytes()
    if len(data) < 13 or data[:8] != POINTS_MAGIC:
        raise ValueError(f"{path}: not a point cloud file")
    flags, count = struct.unpack_from("<BI", data, 8)
    if flags & ~1:
        raise ValueError(f"{path}: unknown flag bits {flags:#x}")
    base = 13
    need = base + 12 * count * (2 if flags & 1 else 1)
    if len(data) != need:
        raise ValueError(f"{path}: expected {need} bytes, found {len(data)}")
    pts = np.frombuffer(data, dtype="<f4", count=3 * count, offset=base)
    pts = pts.reshape(count, 3).copy()
    rgb = None
    if flags & 1:
        rgb = np.frombuffer(
            data, dtype="<f4", count=3 * count, offset=base + 12 * count
        ).reshape(count, 3).copy()
    return pts, rgb


def save_image(path, rgb: np.ndarray) -> None:
    """Write float rgb in [0, 1] as 8-bit PNG (round-to-nearest)."""
    arr = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def save_mask(path, mask: np.ndarray) -> None:
    m = np.asarray(mask).astype(bool)
    Image.fromarray(np.where(m, 255, 0).astype(np.uint8), mode="L").save(path)


def load_mask(path) -> np.ndarray:
    """True where the pixel is dynamic and must be excluded."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"))
    return arr >= 128


@dataclass
class FrameRecord:
    image: str
    pose: SE3Pose
    lidar: str
    timestamp: float
    mask: str | None = None
    depth: str | None = None


class SceneData:
    """A loaded dataset: shared intrinsics, frames sorted by time, lazy arrays."""

    def __init__(self, root: Path, camera: PinholeCamera, frames: list[FrameRecord]):
        self.root = Path(root)
        self.camera = camera
        self.frames = frames
        self._cache: dict = {}

    def __len__(self) -> int:
        return len(self.frames)

    def _cached(self, kind: str, i: int, loader):
        key = (kind, i)
        if key not in self._cache:
            self._cache[key] = loader()
        return self._cache[key]

    def image(self, i: int) -> np.ndarray:
        return self._cached("image", i, lambda: load_image(self.root / self.frames[i].image))

    def sweep(self, i: int) -> LidarSweep:
        def _load():
            pts, rgb = load_points(self.root / self.frames[i].lidar)
            return LidarSweep(points=pts, rgb=rgb, timestamp=self.frames[i].timestamp)

        return self._cached("sweep", i, _load)

    def mask(self, i: int) -> np.ndarray | None:
        rec = self.frames[i]
        if rec.mask is None:
            return None
        return self._cached("mask", i, lambda: load_mask(self.root / rec.mask))

    def gt_depth(self, i: int) -> np.ndarray | None:
        rec = self.frames[i]
        if rec.depth is None:
            return None
        return self._cached("depth", i, lambda: load_depth(self.root / rec.depth))

    def poses(self) -> list[SE3Pose]:
        return [f.pose for f in self.frames]

    def camera_positions(self) -> np.ndarray:
        return np.stack([f.pose.translation for f in self.frames])


def save_manifest(root, camera: PinholeCamera, frames: list[FrameRecord]) -> None:
    doc = {
        "format": MANIFEST_FORMAT,
        "camera": {
            "fx": camera.fx, "fy": camera.fy, "cx": camera.cx, "cy": camera.cy,
            "width": camera.width, "height": camera.height,
        },
        "frames": [
            {
                "image": f.image,
                "pose": f.pose.matrix().tolist(),
                "lidar": f.lidar,
                "timestamp": f.timestamp,
                **({"mask": f.mask} if f.mask else {}),
                **({"depth": f.depth} if f.depth else {}),
            }
            for f in frames
        ],
    }
    with open(Path(root) / "manifest.json", "w") as fh:
        json.dump(doc, fh, indent=1)


def load_scene(root) -> SceneData:
    """Load and validate a dataset directory.

    Every referenced file must exist (the error names the frame), poses must
    be valid rigid transforms, and frames come back sorted by (timestamp,
    image path).
    """
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise ValueError(f"no manifest.json under {root}")
    try:
        doc = json.loads(mpath.read_text())
    except json.JSONDecodeError as e:
        raise ValueError(f"{mpath}: invalid JSON ({e})") from None
    if doc.get("format") != MANIFEST_FORMAT:
        raise ValueError(f"{mpath}: unsupported format {doc.get('format')!r}")
    c = doc["camera"]
    camera = PinholeCamera(
        fx=float(c["fx"]), fy=float(c["fy"]), cx=float(c["cx"]), cy=float(c["cy"]),
        width=int(c["width"]), height=int(c["height"]),
    )
    frames = []
    for k, fr in enumerate(doc["frames"]):
        try:
            pose = SE3Pose.from_matrix(np.asarray(fr["pose"], dtype=np.float64))
        except ValueError as e:
            raise ValueError(f"frame {k}: bad pose ({e})") from None
        rec = FrameRecord(
            image=fr["image"], pose=pose, lidar=fr["lidar"],
            timestamp=float(fr.get("timestamp", k)),
            mask=fr.get("mask"), depth=fr.get("depth"),
        )
        for label, rel in (
            ("image", rec.image), ("lidar", rec.lidar),
            ("mask", rec.mask), ("depth", rec.depth),
        ):
            if rel is not None and not (root / rel).is_file():
                raise ValueError(f"frame {k}: missing {label} file {rel!r}")
        frames.append(rec)
    frames.sort(key=lambda f: (f.timestamp, f.image))
    return SceneData(root, camera, frames)


def generate_dataset(scene, out_dir) -> SceneData:
    """Render a synthetic scene to disk (images, Lidar, poses, gt depth)."""
    from .synthetic import Scene

    assert isinstance(scene, Scene)
    out = Path(out_dir)
    for sub in ("images", "lidar", "depth"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    cfg = scene.config
    cam = scene.camera()
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 0x51DE)))
    frames = []
    for i in range(cfg.frames):
        pose = scene.pose(i)
        ts = i * cfg.timestamp_step
        rgb, depth = scene.render_view(cam, pose)
        sweep = scene.simulate_sweep(pose, ts, rng)
        rel_img = f"images/{i:04d}.png"
        rel_lidar = f"lidar/{i:04d}.ldp"
        rel_depth = f"depth/{i:04d}.ldd"
        save_image(out / rel_img, rgb)
        save_points(out / rel_lidar, sweep.points)
        save_depth(out / rel_depth, depth)
        frames.append(
            FrameRecord(image=rel_img, pose=pose, lidar=rel_lidar,
                        timestamp=ts, depth=rel_depth)
        )
    save_manifest(out, cam, frames)
    return load_scene(out)
