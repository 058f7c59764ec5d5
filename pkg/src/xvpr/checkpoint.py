"""Flat binary container of named float64 tensors.

Layout (little-endian)::

    b"XVPR" | version: u8 | count: u32
    per entry: name_len: u32 | name (utf-8) | rank: u32 | dims: rank × i64 | values: float64
"""
from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

MAGIC = b"XVPR"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, count = struct.unpack_from("<BI", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 9
    out: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}q", blob, pos)
            pos += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            vals = np.frombuffer(blob, dtype="<f8", count=n, offset=pos)
            pos += 8 * n
            out[name] = vals.reshape(dims).astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise CheckpointError("trailing bytes after last checkpoint entry")
    return out


def save(path, tensors: dict[str, np.ndarray]) -> bytes:
    blob = dumps(tensors)
    Path(path).write_bytes(blob)
    return blob


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())


def fingerprint(blob: bytes) -> bytes:
    """32-byte SHA-256 of the serialized checkpoint."""
    return hashlib.sha256(blob).digest()
