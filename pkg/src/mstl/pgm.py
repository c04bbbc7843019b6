"""Binary PGM (P5) read/write for 8-bit grayscale rasters.

Images travel in-memory as float64 arrays in [0, 1]; on disk they are
quantized to 8 bits. Writing is byte-deterministic across platforms.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import DataIOError


def encode_pgm(image: np.ndarray) -> bytes:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise DataIOError(f"PGM expects a 2-D image, got shape {img.shape}")
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = q.shape
    return b"P5\n%d %d\n255\n" % (w, h) + q.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pgm(image))


def decode_pgm(blob: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise DataIOError("not a binary PGM (P5) file")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataIOError(f"only 8-bit PGM supported, got maxval {maxval}")
    body = blob[m.end():]
    if len(body) < w * h:
        raise DataIOError("truncated PGM pixel data")
    pixels = np.frombuffer(body, dtype=np.uint8, count=w * h)
    return pixels.reshape(h, w).astype(np.float64) / 255.0


def read_pgm(path) -> np.ndarray:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    return decode_pgm(blob)
