"""Binary Netpbm image I/O (P5 grayscale, P6 color, 8-bit).

Images move through the pipeline as float64 arrays in [0, 1] shaped (C, H, W)
with C = 1 or 3, masks as (H, W) arrays with values in {0.0, 1.0}.  Byte
mapping is v / 255 on read and round-half-up on write, so write(read(f))
reproduces f byte for byte.
"""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    """Malformed or unsupported Netpbm data."""


_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*([0-9]+|P[56])")


def _read_header(data: bytes):
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(data, pos)
        if not m:
            raise NetpbmError(f"bad netpbm header near byte {pos}")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0].decode()
    if magic not in ("P5", "P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    if not all(f.isdigit() for f in fields[1:]):
        raise NetpbmError("non-numeric header field")
    width, height, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise NetpbmError(f"only maxval 255 supported, got {maxval}")
    # single whitespace byte separates header from raster
    return magic, width, height, pos + 1


def read_image(path) -> np.ndarray:
    """Read a P5/P6 file into a float64 (C, H, W) array in [0, 1]."""
    data = Path(path).read_bytes()
    magic, w, h, start = _read_header(data)
    channels = 3 if magic == "P6" else 1
    need = w * h * channels
    raster = data[start:start + need]
    if len(raster) != need:
        raise NetpbmError(f"truncated raster: expected {need} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / 255.0
    return np.ascontiguousarray(arr.reshape(h, w, channels).transpose(2, 0, 1))


def _quantize(img: np.ndarray) -> np.ndarray:
    v = np.floor(np.asarray(img, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write a (C, H, W) float array in [0, 1] as P5 (C=1) or P6 (C=3)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] not in (1, 3):
        raise NetpbmError(f"expected (C, H, W) with C in {{1, 3}}, got {img.shape}")
    c, h, w = img.shape
    magic = b"P6" if c == 3 else b"P5"
    raster = _quantize(img.transpose(1, 2, 0)).tobytes()
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + raster)


def read_mask(path) -> np.ndarray:
    """Read a P5 file as a strictly binary (H, W) mask (1 = hole)."""
    img = read_image(path)
    if img.shape[0] != 1:
        raise NetpbmError("masks must be grayscale P5")
    m = img[0]
    if not np.all((m == 0.0) | (m == 1.0)):
        raise NetpbmError("mask bytes must be exactly 0 or 255")
    return m


def write_mask(path, mask: np.ndarray) -> None:
    """Write a binary (H, W) mask as P5 with bytes in {0, 255}."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or not np.all((mask == 0.0) | (mask == 1.0)):
        raise NetpbmError("mask must be a binary (H, W) array")
    write_image(path, mask[None])
