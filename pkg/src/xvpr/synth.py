"""Procedural cross-modal place dataset.

Each place is a random arrangement of soft-edged bars and blobs. The image
modality renders it (with an illumination preset per scenario); the event
modality simulates a small camera translation and fires an event wherever
the log intensity at a pixel changes by more than a contrast threshold.
Places sit along a gently curving route, 50 m apart.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .events import (EARTH_RADIUS_M, EventStream, GeoTag, SampleRecord, slice_windows,
                     write_events, write_geotags, write_manifest)
from .frames import event_frame
from .imageio import write_pgm, write_ppm, write_sidecar

log = logging.getLogger(__name__)

# gain, gamma, RGB tint, noise sigma
SCENARIOS = {
    "daytime": (1.0, 1.0, (1.0, 1.0, 1.0), 0.01),
    "sunset": (0.75, 1.2, (1.0, 0.8, 0.6), 0.015),
    "sunrise": (0.8, 1.1, (1.0, 0.9, 0.75), 0.015),
    "morning": (0.9, 0.9, (0.9, 0.95, 1.0), 0.01),
    "night": (0.3, 1.6, (0.8, 0.85, 1.0), 0.03),
}

PLACE_SPACING_M = 50.0
ROUTE_START = (-27.4698, 153.0251)


@dataclass(frozen=True)
class Primitive:
    kind: str  # "bar" or "blob"
    cx: float
    cy: float
    size: float  # bar half-length or blob radius
    width: float  # bar half-width (unused for blobs)
    angle: float
    level: float


@dataclass(frozen=True)
class SyntheticScene:
    place: int
    geotag: GeoTag
    background: tuple[float, float, float]  # base, x-slope, y-slope
    primitives: tuple[Primitive, ...]


def random_scene(rng: np.random.Generator, place: int, geotag: GeoTag, width: int,
                 height: int) -> SyntheticScene:
    # dense enough that most local patches hold some structure, as real street scenes do
    prims = []
    for _ in range(rng.integers(8, 15)):
        prims.append(Primitive("bar", rng.uniform(0, width), rng.uniform(0, height),
                               rng.uniform(0.1, 0.4) * width, rng.uniform(1.0, 3.0),
                               rng.uniform(0, math.pi), rng.uniform(-0.6, 0.6)))
    for _ in range(rng.integers(4, 9)):
        prims.append(Primitive("blob", rng.uniform(0, width), rng.uniform(0, height),
                               rng.uniform(2.0, 0.15 * height), 0.0, 0.0, rng.uniform(-0.5, 0.5)))
    bg = (rng.uniform(0.35, 0.65), rng.uniform(-0.2, 0.2) / width, rng.uniform(-0.2, 0.2) / height)
    return SyntheticScene(place, geotag, bg, tuple(prims))


def _soft_step(d):
    # distance (pixels, negative inside) -> coverage in [0, 1]
    return 1.0 / (1.0 + np.exp(np.clip(2.5 * d, -50, 50)))


def render(scene: SyntheticScene, width: int, height: int, dx: float = 0.0,
           dy: float = 0.0) -> np.ndarray:
    """Grayscale H×W rendering with the camera shifted by (dx, dy) pixels."""
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    xs = xs + 0.5 + dx
    ys = ys + 0.5 + dy
    base, gx, gy = scene.background
    img = base + gx * (xs - width / 2) + gy * (ys - height / 2)
    for p in scene.primitives:
        if p.kind == "bar":
            c, s = math.cos(p.angle), math.sin(p.angle)
            u = (xs - p.cx) * c + (ys - p.cy) * s
            v = -(xs - p.cx) * s + (ys - p.cy) * c
            d = np.maximum(np.abs(u) - p.size, np.abs(v) - p.width)
        else:
            d = np.hypot(xs - p.cx, ys - p.cy) - p.size
        img = img + p.level * _soft_step(d)
    return np.clip(img, 0.0, 1.0)


def render_image(scene, width, height, scenario: str, rng) -> np.ndarray:
    gain, gamma, tint, sigma = SCENARIOS[scenario]
    gray = render(scene, width, height)
    img = np.stack([np.clip(gain * t * gray ** gamma, 0, 1) for t in tint])
    img = img + rng.normal(0.0, sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def simulate_events(scene, width, height, rng, t0: int, window_us: int = 25_000,
                    steps: int = 8, shift_px: float = 1.5, threshold: float = 0.25,
                    noise_rate: float = 0.004) -> EventStream:
    """Events from a straight camera translation over one window, plus salt noise.

    The stream starts with an event at ``t0`` and ends with one at
    ``t0 + window_us`` so it holds exactly one complete window.
    """
    theta = rng.uniform(0, 2 * math.pi)
    mag = rng.uniform(0.6, 1.0) * shift_px
    vx, vy = mag * math.cos(theta), mag * math.sin(theta)
    ref = np.log(render(scene, width, height) + 0.05)
    ts, xs, ys, ps = [], [], [], []
    for k in range(1, steps + 1):
        cur = np.log(render(scene, width, height, vx * k / steps, vy * k / steps) + 0.05)
        diff = cur - ref
        fired = np.abs(diff) > threshold
        yy, xx = np.nonzero(fired)
        lo = t0 + (k - 1) * window_us // steps
        hi = t0 + k * window_us // steps
        ts.append(rng.integers(lo, hi, size=len(xx)))
        xs.append(xx)
        ys.append(yy)
        ps.append(np.where(diff[yy, xx] > 0, 1, -1))
        ref[fired] = cur[fired]
    n_noise = rng.poisson(noise_rate * width * height)
    ts.append(rng.integers(t0, t0 + window_us, size=n_noise))
    xs.append(rng.integers(0, width, size=n_noise))
    ys.append(rng.integers(0, height, size=n_noise))
    ps.append(rng.choice([-1, 1], size=n_noise))
    # anchors pinning the window bounds
    ts += [np.array([t0]), np.array([t0 + window_us])]
    xs += [rng.integers(0, width, size=1), rng.integers(0, width, size=1)]
    ys += [rng.integers(0, height, size=1), rng.integers(0, height, size=1)]
    ps += [np.array([1]), np.array([1])]
    t = np.concatenate(ts)
    order = np.lexsort((np.concatenate(xs), np.concatenate(ys), t))
    return EventStream.from_arrays(t[order], np.concatenate(xs)[order], np.concatenate(ys)[order],
                                   np.concatenate(ps)[order], (width, height))


def route(places: int, rng) -> list[GeoTag]:
    lat, lon = ROUTE_START
    heading = rng.uniform(0, 2 * math.pi)
    tags = []
    for i in range(places):
        tags.append(GeoTag(round(lat, 9), round(lon, 9), i * 1_000_000))
        heading += rng.normal(0.0, 0.05)
        dlat = PLACE_SPACING_M * math.cos(heading) / EARTH_RADIUS_M
        dlon = PLACE_SPACING_M * math.sin(heading) / (EARTH_RADIUS_M * math.cos(math.radians(lat)))
        lat += math.degrees(dlat)
        lon += math.degrees(dlon)
    return tags


def synth_generate(out_dir, seed: int = 42, places: int = 50, scenarios=("daytime",),
                   width: int = 64, height: int = 48, window_us: int = 25_000,
                   d_max: float = 4.0) -> list[SampleRecord]:
    """Write a synthetic dataset under ``out_dir`` and return its manifest records.

    Layout: ``manifest.csv``, ``route.geotags``, ``images/<scenario>/pNNNN.ppm``,
    ``events/<scenario>/pNNNN.txt`` and the converted event frames
    ``frames/<scenario>/pNNNN.{f64,pgm}``. Manifest paths are relative.
    """
    if places < 10:
        raise ValueError("synthetic benchmark needs at least 10 places")
    unknown = [s for s in scenarios if s not in SCENARIOS]
    if unknown:
        raise ValueError(f"unknown scenarios {unknown}; choose from {sorted(SCENARIOS)}")
    out = Path(out_dir)
    for sub in ("images", "events", "frames"):
        for s in scenarios:
            (out / sub / s).mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    route_rng, *place_seeds = [np.random.default_rng(s) for s in root.spawn(places + 1)]
    tags = route(places, route_rng)
    write_geotags(out / "route.geotags", tags)
    records = []
    for i, (tag, rng) in enumerate(zip(tags, place_seeds)):
        scene = random_scene(rng, i, tag, width, height)
        name = f"p{i:04d}"
        for s in scenarios:
            img = render_image(scene, width, height, s, rng)
            write_ppm(out / "images" / s / f"{name}.ppm", img)
            stream = simulate_events(scene, width, height, rng, tag.t, window_us)
            write_events(out / "events" / s / f"{name}.txt", stream)
            (win,) = slice_windows(stream, window_us)
            frame = event_frame(win, d_max=d_max, window_id=f"{s}/{name}")
            write_sidecar(out / "frames" / s / f"{name}.f64", frame.intensity)
            write_pgm(out / "frames" / s / f"{name}.pgm", frame.intensity)
            records.append(SampleRecord(f"{s}/{name}/event", "event", f"frames/{s}/{name}.f64",
                                        tag, "", s))
            records.append(SampleRecord(f"{s}/{name}/image", "image", f"images/{s}/{name}.ppm",
                                        tag, "", s))
    write_manifest(out / "manifest.csv", records)
    log.info("wrote %d places x %d scenarios to %s", places, len(scenarios), out)
    return records
