"""Raster interchange format and viewer exports (PGM / PPM)."""

from __future__ import annotations

import struct

import numpy as np

# magic, u32 rows, u32 cols, f64 pixel size (mm), 4-byte element tag, payload
MAGIC = b"DKRASTER"
ELEMENT_TAG = b"f8le"
_HEADER = struct.Struct("<8sIId4s")


def write_raster(path, array, pixel_size_mm: float = 1.0) -> None:
    a = np.asarray(array, dtype=float)
    if a.ndim != 2:
        raise ValueError("rasters are 2-D")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, a.shape[0], a.shape[1], float(pixel_size_mm), ELEMENT_TAG))
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_raster(path, with_pixel_size: bool = False):
    with open(path, "rb") as fh:
        magic, rows, cols, pix, tag = _HEADER.unpack(fh.read(_HEADER.size))
        if magic != MAGIC:
            raise ValueError(f"{path}: not a raster file")
        if tag != ELEMENT_TAG:
            raise ValueError(f"{path}: unsupported element type {tag!r}")
        data = np.frombuffer(fh.read(rows * cols * 8), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated payload")
    a = data.astype(float).reshape(rows, cols)
    return (a, pix) if with_pixel_size else a


def _minmax(a):
    a = np.asarray(a, dtype=float)
    lo, hi = float(a.min()), float(a.max())
    return np.zeros_like(a) if hi == lo else (a - lo) / (hi - lo)


def write_pgm16(path, array) -> None:
    """Min-max scaled 16-bit binary PGM."""
    a = np.round(_minmax(array) * 65535).astype(">u2")
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n65535\n".encode("ascii"))
        fh.write(a.tobytes())


def read_pgm16(path) -> np.ndarray:
    with open(path, "rb") as fh:
        tokens = []
        while len(tokens) < 4:
            tokens.extend(fh.readline().split())
        if tokens[0] != b"P5":
            raise ValueError("not a binary PGM")
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        dtype = ">u2" if maxval > 255 else "u1"
        return np.frombuffer(fh.read(), dtype=dtype).reshape(h, w).astype(np.int64)


def hot_colormap(v) -> np.ndarray:
    """Black-red-yellow-white ramp; monotone in luminance over [0, 1]."""
    v = np.clip(np.asarray(v, dtype=float), 0.0, 1.0)
    return np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)], axis=-1)


OVERLAY_BLEND = 0.5


def overlay_rgb(attention, structural, blend: float = OVERLAY_BLEND) -> np.ndarray:
    """``(1 - blend) * gray(structural) + blend * hot(attention / max)``, RGB in [0, 1]."""
    att = np.asarray(attention, dtype=float)
    peak = att.max()
    colour = hot_colormap(att / peak if peak > 0 else att)
    gray = np.repeat(_minmax(structural)[..., None], 3, axis=-1)
    return (1.0 - blend) * gray + blend * colour


def write_ppm(path, rgb) -> None:
    a = np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{a.shape[1]} {a.shape[0]}\n255\n".encode("ascii"))
        fh.write(a.tobytes())
