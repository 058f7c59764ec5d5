"""Netpbm images (8-bit P5/P6) and the raw float64 frame sidecar.

Sidecar layout (little-endian): ``b"XVFR" | width: u32 | height: u32 |
channels: u32 | values: float64 × channels·height·width`` in C×H×W order.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

SIDECAR_MAGIC = b"XVFR"


class ImageError(ValueError):
    pass


def _quantize(grid: np.ndarray) -> np.ndarray:
    return np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_pgm(path, grid: np.ndarray) -> None:
    """Write an H×W grid in [0, 1] as binary PGM."""
    h, w = grid.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + _quantize(grid).tobytes())


def write_ppm(path, image: np.ndarray) -> None:
    """Write a 3×H×W image in [0, 1] as binary PPM."""
    c, h, w = image.shape
    if c != 3:
        raise ImageError(f"PPM needs 3 channels, got {c}")
    data = _quantize(image).transpose(1, 2, 0).tobytes()
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + data)


def _read_tokens(blob: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageError("truncated netpbm header")
        tokens.append(blob[start:pos])
    return tokens, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Read P5/P6 into C×H×W float64 in [0, 1] (C = 1 or 3)."""
    blob = Path(path).read_bytes()
    try:
        (magic, w, h, maxval), pos = _read_tokens(blob, 4)
        w, h, maxval = int(w), int(h), int(maxval)
    except (ImageError, ValueError) as exc:
        raise ImageError(f"{path}: bad netpbm header ({exc})") from None
    if magic not in (b"P5", b"P6") or maxval != 255:
        raise ImageError(f"{path}: only 8-bit P5/P6 are supported")
    c = 1 if magic == b"P5" else 3
    raw = np.frombuffer(blob, dtype=np.uint8, offset=pos)
    if raw.size < w * h * c:
        raise ImageError(f"{path}: truncated pixel data")
    img = raw[: w * h * c].reshape(h, w, c).transpose(2, 0, 1)
    return img.astype(np.float64) / 255.0


def write_sidecar(path, array: np.ndarray) -> None:
    arr = np.asarray(array, dtype="<f8")
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    Path(path).write_bytes(SIDECAR_MAGIC + struct.pack("<III", w, h, c) + arr.tobytes())


def read_sidecar(path) -> np.ndarray:
    """Return the stored grid as C×H×W float64."""
    blob = Path(path).read_bytes()
    if blob[:4] != SIDECAR_MAGIC:
        raise ImageError(f"{path}: not a frame sidecar")
    w, h, c = struct.unpack_from("<III", blob, 4)
    if len(blob) != 16 + 8 * w * h * c:
        raise ImageError(f"{path}: sidecar size does not match its header")
    return np.frombuffer(blob, dtype="<f8", offset=16).reshape(c, h, w).astype(np.float64)


def resize(image: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize of a C×H×W array (pixel-center aligned)."""
    c, h, w = image.shape
    if (w, h) == (width, height):
        return image
    ys = np.clip((np.arange(height) + 0.5) * h / height - 0.5, 0, h - 1)
    xs = np.clip((np.arange(width) + 0.5) * w / width - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = image[:, y0][:, :, x0] * (1 - fx) + image[:, y0][:, :, x1] * fx
    bot = image[:, y1][:, :, x0] * (1 - fx) + image[:, y1][:, :, x1] * fx
    return top * (1 - fy) + bot * fy


def load_sample(path, channels: int, width: int, height: int) -> np.ndarray:
    """Load a frame or image file as channels×height×width.

    Larger inputs are resized down; smaller ones are rejected.
    """
    path = Path(path)
    try:
        if path.suffix == ".f64":
            arr = read_sidecar(path)
        else:
            arr = read_netpbm(path)
    except OSError as exc:
        raise ImageError(f"cannot read {path}: {exc}") from None
    if arr.shape[0] != channels:
        if arr.shape[0] == 1 and channels == 3:
            arr = np.repeat(arr, 3, axis=0)
        elif arr.shape[0] == 3 and channels == 1:
            arr = arr.mean(axis=0, keepdims=True)
    h, w = arr.shape[1:]
    if (w, h) != (width, height):
        if w < width or h < height:
            raise ImageError(f"{path}: {w}x{h} is smaller than the configured {width}x{height}")
        arr = resize(arr, width, height)
    return arr
