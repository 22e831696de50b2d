"""Binary checkpoint format.

Layout: 8-byte magic, u32 little-endian header length, UTF-8 JSON header, then
the raw parameter blocks back to back as little-endian float32 in header
order. The header carries block names and shapes, the training step, a config
hash, and an ``extra`` dict for small non-tensor state (RNG state, curriculum
scalars as hex floats, the config itself).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"LDRFCKPT"
FORMAT = "ldrf-checkpoint/1"


def save_checkpoint(
    path,
    blocks: dict[str, np.ndarray],
    step: int,
    config_hash: str,
    extra: dict | None = None,
) -> None:
    header = {
        "format": FORMAT,
        "step": int(step),
        "config_hash": config_hash,
        "blocks": [
            {"name": name, "shape": list(arr.shape)} for name, arr in blocks.items()
        ],
        "extra": extra or {},
    }
    payload = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(payload)))
        f.write(payload)
        for arr in blocks.values():
            f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path):
    """Returns (blocks, step, config_hash, extra). Truncation and magic/format
    mismatches raise ValueError."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<I", data, len(MAGIC))
    off = len(MAGIC) + 4
    if len(data) < off + hlen:
        raise ValueError(f"{path}: truncated checkpoint header")
    header = json.loads(data[off : off + hlen].decode("utf-8"))
    if header.get("format") != FORMAT:
        raise ValueError(f"{path}: unsupported checkpoint format {header.get('format')!r}")
    off += hlen
    blocks = {}
    for spec in header["blocks"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 4
        if len(data) < off + nbytes:
            raise ValueError(f"{path}: truncated block {spec['name']!r}")
        blocks[spec["name"]] = np.frombuffer(
            data, dtype="<f4", count=count, offset=off
        ).reshape(shape).copy()
        off += nbytes
    if off != len(data):
        raise ValueError(f"{path}: {len(data) - off} trailing bytes after blocks")
    return blocks, header["step"], header["config_hash"], header.get("extra", {})
