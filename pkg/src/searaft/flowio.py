"""Middlebury ``.flo`` files, portable pixmaps, and color-wheel flow rendering."""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .fields import FlowField

FLO_MAGIC = 202021.25
UNKNOWN_FLOW = 1e9
_FLO_HEADER = struct.Struct("<fii")


class FloFormatError(ValueError):
    """Header does not describe a ``.flo`` file."""


class FloCorruptError(ValueError):
    """Payload is shorter or longer than the header promises."""


def write_flo(field: FlowField, path: str | Path) -> None:
    """Invalid pixels are written as ``1e9`` in both components."""
    h, w = field.shape
    data = np.array(field.vectors, dtype="<f4")
    data[~field.valid] = UNKNOWN_FLOW
    with open(path, "wb") as f:
        f.write(_FLO_HEADER.pack(FLO_MAGIC, w, h))
        f.write(np.ascontiguousarray(data).tobytes())


def read_flo(path: str | Path) -> FlowField:
    raw = Path(path).read_bytes()
    if len(raw) < _FLO_HEADER.size:
        raise FloFormatError(f"{path}: too short for a .flo header")
    magic, w, h = _FLO_HEADER.unpack_from(raw)
    if magic != np.float32(FLO_MAGIC):
        raise FloFormatError(f"{path}: bad magic {magic!r}")
    if w < 0 or h < 0:
        raise FloFormatError(f"{path}: negative extent {w}x{h}")
    payload = raw[_FLO_HEADER.size :]
    if len(payload) != 8 * w * h:
        raise FloCorruptError(f"{path}: expected {8 * w * h} payload bytes, found {len(payload)}")
    vec = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(h, w, 2)
    valid = (np.abs(vec) < UNKNOWN_FLOW).all(axis=-1)
    return FlowField(vec, valid)


# ---------------------------------------------------------------------------
# 8-bit portable pixmaps (binary PPM)
# ---------------------------------------------------------------------------


def write_ppm(image: np.ndarray, path: str | Path) -> None:
    """Write (H, W, 3) uint8 data, or floats in [0, 1] which are quantized."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode())
        f.write(np.ascontiguousarray(img).tobytes())


def read_image(path: str | Path) -> np.ndarray:
    """Load an RGB image as float32 in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# color wheel
# ---------------------------------------------------------------------------


def make_colorwheel() -> np.ndarray:
    """55 x 3 Middlebury wheel (segments RY 15, YG 6, GC 4, CB 11, BM 13, MR 6), values 0..255."""
    ry, yg, gc, cb, bm, mr = 15, 6, 4, 11, 13, 6
    wheel = np.zeros((ry + yg + gc + cb + bm + mr, 3))
    col = 0
    wheel[col : col + ry, 0] = 255
    wheel[col : col + ry, 1] = np.floor(255 * np.arange(ry) / ry)
    col += ry
    wheel[col : col + yg, 0] = 255 - np.floor(255 * np.arange(yg) / yg)
    wheel[col : col + yg, 1] = 255
    col += yg
    wheel[col : col + gc, 1] = 255
    wheel[col : col + gc, 2] = np.floor(255 * np.arange(gc) / gc)
    col += gc
    wheel[col : col + cb, 1] = 255 - np.floor(255 * np.arange(cb) / cb)
    wheel[col : col + cb, 2] = 255
    col += cb
    wheel[col : col + bm, 2] = 255
    wheel[col : col + bm, 0] = np.floor(255 * np.arange(bm) / bm)
    col += bm
    wheel[col : col + mr, 2] = 255 - np.floor(255 * np.arange(mr) / mr)
    wheel[col : col + mr, 0] = 255
    return wheel


def flow_to_color(field: FlowField, max_norm: float | None = None) -> np.ndarray:
    """Render flow as an (H, W, 3) uint8 image.

    Hue follows direction, saturation follows ``|flow| / max_norm`` clamped to
    1; invalid pixels are black. ``max_norm`` defaults to the largest valid
    magnitude.
    """
    if max_norm is not None and max_norm <= 0:
        raise ValueError(f"max_norm must be positive, got {max_norm}")
    u = np.where(field.valid, field.u, 0.0).astype(np.float64)
    v = np.where(field.valid, field.v, 0.0).astype(np.float64)
    rad = np.hypot(u, v)
    if max_norm is None:
        max_norm = float(rad.max()) if rad.max() > 0 else 1.0
    sat = np.clip(rad / max_norm, 0.0, 1.0)

    wheel = make_colorwheel()
    n = wheel.shape[0]
    angle = np.arctan2(-v, -u) / np.pi
    fk = (angle + 1) / 2 * (n - 1)
    k0 = np.floor(fk).astype(np.int64)
    k1 = (k0 + 1) % n
    f = (fk - k0)[..., None]
    col = ((1 - f) * wheel[k0] + f * wheel[k1]) / 255.0
    col = 1 - sat[..., None] * (1 - col)
    img = np.floor(255 * col).astype(np.uint8)
    img[~field.valid] = 0
    return img
