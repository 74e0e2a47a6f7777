"""On-disk formats: PXR1 arrays, JSON sidecars and 16-bit PGM previews.

PXR1 layout (little endian): the 4-byte magic ``PXR1``, a u32 rank, ``rank``
u32 dimensions, then the float64 values in row-major order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"PXR1"


class DataFileError(Exception):
    pass


class MissingFileError(DataFileError, FileNotFoundError):
    pass


class CorruptFileError(DataFileError, ValueError):
    pass


class ShapeMismatchError(DataFileError, ValueError):
    pass


def write_array(path, arr) -> None:
    arr = np.array(arr, dtype="<f8", order="C")
    header = MAGIC + struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def read_array(path, expect_shape=None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such array file: {path}")
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise CorruptFileError(f"{path}: bad or truncated header")
    (rank,) = struct.unpack_from("<I", raw, 4)
    offset = 8 + 4 * rank
    if rank > 32 or len(raw) < offset:
        raise CorruptFileError(f"{path}: bad or truncated header")
    dims = struct.unpack_from(f"<{rank}I", raw, 8)
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) != offset + 8 * count:
        raise CorruptFileError(f"{path}: expected {count} values, file holds {(len(raw) - offset) // 8}")
    arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(dims).astype(np.float64)
    if expect_shape is not None and tuple(arr.shape) != tuple(expect_shape):
        raise ShapeMismatchError(f"{path}: shape {arr.shape}, expected {tuple(expect_shape)}")
    return arr


def write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"no such file: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"{path}: invalid JSON ({exc})") from exc


def write_pgm(path, img) -> None:
    """16-bit binary PGM with linear min-max scaling recorded in a comment."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    span = hi - lo
    scaled = np.zeros(img.shape) if span == 0 else (img - lo) / span
    data = np.round(scaled * 65535).astype(">u2")
    h, w = img.shape
    header = f"P5\n# linear scaling: 0 -> {lo:.12g}, 65535 -> {hi:.12g}\n{w} {h}\n65535\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes())


def read_pgm(path) -> tuple[np.ndarray, float, float]:
    """Inverse of :func:`write_pgm`; returns the rescaled image and (lo, hi)."""
    raw = Path(path).read_bytes()
    lines = raw.split(b"\n", 4)
    if lines[0] != b"P5":
        raise CorruptFileError(f"{path}: not a binary PGM")
    comment = lines[1].decode()
    lo = float(comment.split("0 -> ")[1].split(",")[0])
    hi = float(comment.split("65535 -> ")[1])
    w, h = (int(v) for v in lines[2].split())
    data = np.frombuffer(lines[4], dtype=">u2", count=w * h).reshape(h, w)
    return lo + data.astype(np.float64) / 65535 * (hi - lo), lo, hi


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
