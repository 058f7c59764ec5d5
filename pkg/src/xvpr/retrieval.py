"""Image database, exhaustive nearest-neighbour search and classifier re-ranking.

Database file layout (little-endian)::

    b"XVDB" | version: u8 | count: u32 | fingerprint: 32 bytes
    per entry: id_len: u32 | id (utf-8) | lat: f64 | lon: f64
               | n_retr: u32 | retr: f64 × n_retr | n_cls: u32 | cls: f64 × n_cls
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .events import DataError, GeoTag, SampleRecord, resolve
from .imageio import ImageError, load_sample

DB_MAGIC = b"XVDB"
DB_VERSION = 1
DEFAULT_TOP_N = 30


class FingerprintError(ValueError):
    """Database and checkpoint come from different models."""


@dataclass
class PlaceDatabase:
    ids: list[str]
    geotags: list[GeoTag]
    retr: np.ndarray  # N × (K·D)
    cls: np.ndarray  # N × n
    fingerprint: bytes = b"\0" * 32
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __len__(self):
        return len(self.ids)

    def position(self, sample_id: str) -> int:
        if not self._index:
            self._index.update({sid: i for i, sid in enumerate(self.ids)})
        return self._index[sample_id]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(DB_MAGIC)
        buf.write(struct.pack("<BI", DB_VERSION, len(self.ids)))
        buf.write(self.fingerprint)
        for i, sid in enumerate(self.ids):
            raw = sid.encode("utf-8")
            buf.write(struct.pack("<I", len(raw)) + raw)
            buf.write(struct.pack("<dd", self.geotags[i].latitude, self.geotags[i].longitude))
            for vec in (self.retr[i], self.cls[i]):
                buf.write(struct.pack("<I", vec.size))
                buf.write(np.asarray(vec, dtype="<f8").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> PlaceDatabase:
        if blob[:4] != DB_MAGIC:
            raise DataError("not a place database (bad magic)")
        version, count = struct.unpack_from("<BI", blob, 4)
        if version != DB_VERSION:
            raise DataError(f"unsupported database version {version}")
        fp = blob[9:41]
        pos = 41
        ids, tags, retr, clsv = [], [], [], []
        try:
            for _ in range(count):
                (n,) = struct.unpack_from("<I", blob, pos)
                ids.append(blob[pos + 4 : pos + 4 + n].decode("utf-8"))
                pos += 4 + n
                lat, lon = struct.unpack_from("<dd", blob, pos)
                tags.append(GeoTag(lat, lon))
                pos += 16
                for store in (retr, clsv):
                    (n,) = struct.unpack_from("<I", blob, pos)
                    store.append(np.frombuffer(blob, dtype="<f8", count=n, offset=pos + 4).astype(np.float64))
                    pos += 4 + 8 * n
        except (struct.error, ValueError) as exc:
            raise DataError(f"truncated database: {exc}") from None
        if pos != len(blob):
            raise DataError("trailing bytes after last database entry")
        r = np.array(retr) if retr else np.zeros((0, 0))
        c = np.array(clsv) if clsv else np.zeros((0, 0))
        return cls(ids, tags, r, c, fp)

    @classmethod
    def load(cls, path) -> PlaceDatabase:
        return cls.from_bytes(Path(path).read_bytes())


@dataclass(frozen=True)
class Candidate:
    sample_id: str
    distance: float
    score: float = math.nan
    rank: int = 0


@dataclass(frozen=True)
class QueryResult:
    query_id: str
    candidates: tuple[Candidate, ...]

    def ids(self):
        return [c.sample_id for c in self.candidates]


def load_batch(records, manifest_path, channels, width, height):
    arrays = []
    for r in records:
        try:
            arrays.append(load_sample(resolve(r, manifest_path), channels, width, height))
        except (ImageError, OSError) as exc:
            raise DataError(f"cannot load sample {r.id!r} from {r.path}: {exc}") from None
    return np.stack(arrays) if arrays else np.zeros((0, channels, height, width))


def encode_arrays(model, arrays: np.ndarray, modality: str, batch: int = 32):
    """Encode N×C×H×W arrays; returns (retrieval N×R, cls N×n) numpy arrays."""
    retr, clsv = [], []
    with ad.no_grad():
        for s in range(0, len(arrays), batch):
            r, c = model.encode(arrays[s : s + batch], modality)
            retr.append(r.data)
            clsv.append(c.data)
    if not retr:
        c = model.config
        return np.zeros((0, c.K * c.D)), np.zeros((0, c.cls_dim))
    return np.concatenate(retr), np.concatenate(clsv)


def build_db_from_arrays(records, arrays, model, fingerprint: bytes, batch: int = 32) -> PlaceDatabase:
    retr, clsv = encode_arrays(model, arrays, "image", batch)
    return PlaceDatabase([r.id for r in records], [r.geotag for r in records], retr, clsv, fingerprint)


def build_db(records: list[SampleRecord], manifest_path, model, fingerprint: bytes | None = None,
             batch: int = 32) -> PlaceDatabase:
    """Encode every image record into a database entry, in manifest order."""
    c = model.config
    images = [r for r in records if r.modality == "image"]
    arrays = load_batch(images, manifest_path, 3, c.input_width, c.input_height)
    fp = model.fingerprint() if fingerprint is None else fingerprint
    return build_db_from_arrays(images, arrays, model, fp, batch)


def search(db: PlaceDatabase, query_retr: np.ndarray, top_n: int = DEFAULT_TOP_N) -> list[Candidate]:
    """Exhaustive Euclidean scan, nearest first; ties keep database order."""
    if top_n < 1:
        raise ValueError("top_n must be >= 1")
    if len(db) == 0:
        return []
    q = np.asarray(query_retr, dtype=np.float64).reshape(-1)
    if q.size != db.retr.shape[1]:
        raise ValueError(f"query descriptor has length {q.size}, database uses {db.retr.shape[1]}")
    dist = np.sqrt(((db.retr - q) ** 2).sum(axis=1))
    order = np.argsort(dist, kind="stable")[:top_n]
    return [Candidate(db.ids[i], float(dist[i]), rank=k + 1) for k, i in enumerate(order)]


def check_fingerprint(db: PlaceDatabase, fingerprint: bytes) -> None:
    if db.fingerprint != fingerprint:
        raise FingerprintError(
            f"database fingerprint {db.fingerprint.hex()[:16]}... does not match checkpoint "
            f"{fingerprint.hex()[:16]}...; rebuild the database with this checkpoint")


def score_candidates(db, query_cls, candidates, model) -> np.ndarray:
    rows = np.array([db.position(c.sample_id) for c in candidates], dtype=np.int64)
    q = np.broadcast_to(np.asarray(query_cls, dtype=np.float64).reshape(1, -1), (len(rows), db.cls.shape[1]))
    with ad.no_grad():
        return model.similarity(q, db.cls[rows]).data.reshape(-1)


def order_by_score(query_id, candidates, scores) -> QueryResult:
    """Final order: score descending, then retrieval distance, then sample id."""
    keyed = sorted(zip(candidates, scores), key=lambda cs: (-cs[1], cs[0].distance, cs[0].sample_id))
    return QueryResult(query_id, tuple(Candidate(c.sample_id, c.distance, float(s), k + 1)
                                       for k, (c, s) in enumerate(keyed)))


def rerank(db, query_cls, candidates, model, fingerprint: bytes | None = None,
           query_id: str = "") -> QueryResult:
    if fingerprint is not None:
        check_fingerprint(db, fingerprint)
    if not candidates:
        return QueryResult(query_id, ())
    return order_by_score(query_id, candidates, score_candidates(db, query_cls, candidates, model))


def query(db, frame: np.ndarray, model, fingerprint: bytes | None = None,
          top_n: int = DEFAULT_TOP_N, query_id: str = "", modality: str = "event") -> QueryResult:
    """Encode one frame, retrieve the top-N database entries and re-rank them."""
    fp = model.fingerprint() if fingerprint is None else fingerprint
    check_fingerprint(db, fp)
    arr = np.asarray(frame, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    retr, clsv = encode_arrays(model, arr[None], modality)
    return rerank(db, clsv[0], search(db, retr[0], top_n), model, None, query_id)


def results_csv(results) -> str:
    lines = ["query_id,rank,candidate_id,distance,score"]
    for res in results:
        for c in res.candidates:
            lines.append(f"{res.query_id},{c.rank},{c.sample_id},{c.distance!r},{c.score!r}")
    return "\n".join(lines) + "\n"
