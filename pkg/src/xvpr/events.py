"""Event streams, geotag tracks, fixed-duration windows and route splits.

File formats (UTF-8 text, space separated):

* event file: first line ``width height``, then one ``t x y p`` line per
  event with ``t`` in microseconds and ``p`` in {-1, 1}
* geotag file: one ``t lat lon`` line per GPS fix
* manifest: one ``id,modality,path,lat,lon,split[,scenario]`` line per sample
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
SPLITS = ("train", "val", "test")
MODALITIES = ("event", "image")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events stored column-wise."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_size: tuple[int, int]  # (width, height)

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for t, x, y, p in zip(self.t, self.x, self.y, self.p):
            yield Event(int(x), int(y), int(t), int(p))

    @classmethod
    def from_arrays(cls, t, x, y, p, sensor_size):
        return cls(np.asarray(t, dtype=np.int64), np.asarray(x, dtype=np.int64),
                   np.asarray(y, dtype=np.int64), np.asarray(p, dtype=np.int64),
                   (int(sensor_size[0]), int(sensor_size[1])))


@dataclass(frozen=True)
class EventWindow:
    events: EventStream
    t_start: int
    t_end: int

    @property
    def sensor_size(self):
        return self.events.sensor_size


@dataclass(frozen=True)
class GeoTag:
    latitude: float
    longitude: float
    t: int = 0

    def __post_init__(self):
        if not (-90.0 <= self.latitude <= 90.0 and -180.0 <= self.longitude <= 180.0):
            raise DataError(f"geotag out of range: ({self.latitude}, {self.longitude})")


@dataclass(frozen=True)
class SampleRecord:
    id: str
    modality: str
    path: str
    geotag: GeoTag
    split: str = ""
    scenario: str = "default"
    extra: dict = field(default_factory=dict, compare=False, hash=False)


# ----------------------------------------------------------------------- parsing


def parse_events(path) -> EventStream:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines:
        raise DataError(f"{path}: missing 'width height' header")
    try:
        width, height = (int(v) for v in lines[0].split())
    except ValueError:
        raise DataError(f"{path}:1: header must be 'width height'") from None
    if width <= 0 or height <= 0:
        raise DataError(f"{path}:1: sensor size must be positive")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 4:
                raise ValueError
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed event line {line!r}") from None
        if not (0 <= x < width and 0 <= y < height):
            raise DataError(f"{path}:{lineno}: pixel ({x}, {y}) outside {width}x{height} sensor")
        if p not in (-1, 1):
            raise DataError(f"{path}:{lineno}: polarity must be -1 or 1, got {p}")
        if rows and t < rows[-1][0]:
            raise DataError(f"{path}:{lineno}: timestamp {t} precedes previous {rows[-1][0]}")
        rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream.from_arrays(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], (width, height))


def write_events(path, stream: EventStream) -> None:
    out = [f"{stream.sensor_size[0]} {stream.sensor_size[1]}"]
    out += [f"{t} {x} {y} {p}" for t, x, y, p in zip(stream.t, stream.x, stream.y, stream.p)]
    Path(path).write_text("\n".join(out) + "\n", encoding="utf-8")


def parse_geotags(path) -> list[GeoTag]:
    tags = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        try:
            if len(parts) != 3:
                raise ValueError
            tags.append(GeoTag(float(parts[1]), float(parts[2]), int(parts[0])))
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: malformed geotag line {line!r} ({exc})") from None
    if any(b.t < a.t for a, b in zip(tags, tags[1:])):
        raise DataError(f"{path}: geotag timestamps are not ordered")
    return tags


def write_geotags(path, tags) -> None:
    Path(path).write_text("".join(f"{g.t} {g.latitude!r} {g.longitude!r}\n" for g in tags),
                          encoding="utf-8")


def interpolate_geotag(track: list[GeoTag], t: float) -> GeoTag:
    """Linear interpolation between the fixes bracketing ``t``; clamps at the ends."""
    if not track:
        raise DataError("empty geotag track")
    ts = np.array([g.t for g in track], dtype=np.float64)
    lat = float(np.interp(t, ts, [g.latitude for g in track]))
    lon = float(np.interp(t, ts, [g.longitude for g in track]))
    return GeoTag(lat, lon, int(t))


# ---------------------------------------------------------------------- windows


def slice_windows(stream: EventStream, delta_t: int) -> list[EventWindow]:
    """Cut the stream into back-to-back windows of ``delta_t`` µs from the first event.

    Only complete windows (ending at or before the last timestamp) are kept.
    """
    if delta_t <= 0:
        raise ValueError("window duration must be positive")
    if len(stream) == 0:
        return []
    t0 = int(stream.t[0])
    count = (int(stream.t[-1]) - t0) // delta_t
    bounds = np.searchsorted(stream.t, t0 + delta_t * np.arange(count + 1), side="left")
    windows = []
    for k in range(count):
        lo, hi = bounds[k], bounds[k + 1]
        ev = EventStream(stream.t[lo:hi], stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi],
                         stream.sensor_size)
        windows.append(EventWindow(ev, t0 + k * delta_t, t0 + (k + 1) * delta_t))
    return windows


# ---------------------------------------------------------------------- geodesy


def geo_distance(a: GeoTag, b: GeoTag) -> float:
    """Haversine great-circle distance in meters."""
    return float(haversine(a.latitude, a.longitude, b.latitude, b.longitude))


def haversine(lat1, lon1, lat2, lon2):
    """Vectorised haversine distance in meters; broadcasts over its arguments."""
    p1, p2 = np.radians(lat1), np.radians(lat2)
    dphi = p2 - p1
    dlmb = np.radians(np.asarray(lon2) - np.asarray(lon1))
    h = np.sin(dphi / 2) ** 2 + np.cos(p1) * np.cos(p2) * np.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_min_distance(a: list[GeoTag], b: list[GeoTag], chunk: int = 2048) -> np.ndarray:
    """For each tag in ``a``, the distance to its nearest tag in ``b``."""
    if not b:
        return np.full(len(a), np.inf)
    blat = np.array([g.latitude for g in b])
    blon = np.array([g.longitude for g in b])
    out = np.empty(len(a))
    for s in range(0, len(a), chunk):
        part = a[s : s + chunk]
        alat = np.array([g.latitude for g in part])[:, None]
        alon = np.array([g.longitude for g in part])[:, None]
        out[s : s + len(part)] = haversine(alat, alon, blat[None], blon[None]).min(axis=1)
    return out


def make_splits(records: list[SampleRecord], fractions=(0.8, 0.1, 0.1),
                buffer_m: float = 35.0) -> list[SampleRecord]:
    """Tag records train/val/test as contiguous runs along the traverse.

    Records of a later split lying within ``buffer_m`` of any record of an
    earlier split are dropped, so no two splits come closer than the buffer.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or min(fractions) <= 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three positive numbers summing to 1, got {fractions}")
    n = len(records)
    c1 = round(fractions[0] * n)
    c2 = round((fractions[0] + fractions[1]) * n)
    parts = [list(records[:c1]), list(records[c1:c2]), list(records[c2:])]
    kept: list[list[SampleRecord]] = []
    for name, part in zip(SPLITS, parts):
        earlier = [r.geotag for k in kept for r in k]
        if part and earlier:
            near = pairwise_min_distance([r.geotag for r in part], earlier)
            dropped = int((near <= buffer_m).sum())
            if dropped:
                log.info("split %s: dropped %d records inside the %.0f m buffer", name, dropped, buffer_m)
            part = [r for r, d in zip(part, near) if d > buffer_m]
        if not part:
            raise DataError(f"traverse too short to form a buffered '{name}' split ({n} records)")
        kept.append(part)
    return [replace(r, split=name) for name, part in zip(SPLITS, kept) for r in part]


# --------------------------------------------------------------------- manifest


def read_manifest(path) -> list[SampleRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip():
                continue
            if len(row) not in (6, 7):
                raise DataError(f"{path}:{lineno}: expected 6 or 7 fields, got {len(row)}")
            sid, modality, spath, lat, lon, split = row[:6]
            if modality not in MODALITIES:
                raise DataError(f"{path}:{lineno}: unknown modality {modality!r}")
            if split and split not in SPLITS:
                raise DataError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                tag = GeoTag(float(lat), float(lon))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            scenario = row[6] if len(row) == 7 and row[6] else "default"
            records.append(SampleRecord(sid, modality, spath, tag, split, scenario))
    return records


def write_manifest(path, records, append: bool = False) -> None:
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for r in records:
            w.writerow([r.id, r.modality, r.path, repr(r.geotag.latitude),
                        repr(r.geotag.longitude), r.split, r.scenario])


def resolve(record: SampleRecord, manifest_path) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p
