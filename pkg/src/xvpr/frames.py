"""Distance-surface event frames.

A window of events becomes an occupancy mask, is cleaned (isolated-pixel
denoising, then a 3×3 morphological closing), and each pixel gets the exact
Euclidean distance to the nearest occupied pixel. Intensity falls off
linearly with that distance, so pixels on events are 1.0 and pixels
``d_max`` or further away are 0.0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .events import EventWindow

D_MAX = 12.0
INF = float("inf")


@dataclass(frozen=True)
class EventFrame:
    intensity: np.ndarray  # H×W, values in [0, 1]
    window_id: str = ""

    @property
    def height(self):
        return self.intensity.shape[0]

    @property
    def width(self):
        return self.intensity.shape[1]


def accumulate(window: EventWindow, frame_size: tuple[int, int] | None = None) -> np.ndarray:
    """Boolean H×W mask, true where at least one event fired (any polarity)."""
    width, height = window.sensor_size
    if frame_size is not None and tuple(frame_size) != (width, height):
        raise ValueError(f"window sensor size {(width, height)} != frame size {tuple(frame_size)}")
    mask = np.zeros((height, width), dtype=bool)
    mask[window.events.y, window.events.x] = True
    return mask


def _box_count(mask: np.ndarray, radius: int) -> np.ndarray:
    padded = np.pad(mask.astype(np.int64), radius)
    h, w = mask.shape
    total = np.zeros((h, w), dtype=np.int64)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            total += padded[dy : dy + h, dx : dx + w]
    return total


def denoise(mask: np.ndarray, radius: int = 1, min_neighbors: int = 1) -> np.ndarray:
    """Keep a true cell only if ≥ min_neighbors other true cells lie within Chebyshev ``radius``."""
    if radius < 1:
        raise ValueError("denoise radius must be >= 1")
    neighbors = _box_count(mask, radius) - mask
    return mask & (neighbors >= min_neighbors)


def fill(mask: np.ndarray) -> np.ndarray:
    """3×3 morphological closing. Pixels outside the grid count as set during erosion."""
    h, w = mask.shape
    padded = np.pad(mask, 1, constant_values=False)
    dil = np.zeros_like(mask)
    for dy in range(3):
        for dx in range(3):
            dil |= padded[dy : dy + h, dx : dx + w]
    padded = np.pad(dil, 1, constant_values=True)
    ero = np.ones_like(mask)
    for dy in range(3):
        for dx in range(3):
            ero &= padded[dy : dy + h, dx : dx + w]
    return ero


def _squared_edt_1d(f: list[float]) -> list[float]:
    """Lower envelope of parabolas: d[p] = min_q (p − q)² + f[q]."""
    n = len(f)
    finite = [q for q in range(n) if f[q] != INF]
    if not finite:
        return [INF] * n
    v = [finite[0]]
    z = [-INF, INF]
    for q in finite[1:]:
        fq = f[q] + q * q
        while True:
            r = v[-1]
            s = (fq - (f[r] + r * r)) / (2.0 * (q - r))
            if s > z[-2]:
                break
            v.pop()
            z.pop()
        z[-1] = s
        v.append(q)
        z.append(INF)
    d = [0.0] * n
    k = 0
    for p in range(n):
        while z[k + 1] < p:
            k += 1
        r = v[k]
        d[p] = (p - r) * (p - r) + f[r]
    return d


def squared_distance(mask: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance transform, columns then rows."""
    f = np.where(mask, 0.0, INF)
    cols = np.array([_squared_edt_1d(col) for col in f.T.tolist()]).T
    return np.array([_squared_edt_1d(row) for row in cols.tolist()])


def distance_surface(mask: np.ndarray, d_max: float = D_MAX) -> np.ndarray:
    """Exact Euclidean distance from each pixel to the nearest true cell."""
    if not mask.any():
        return np.full(mask.shape, float(d_max))
    return np.sqrt(squared_distance(mask))


def to_intensity(distance: np.ndarray, d_max: float = D_MAX, window_id: str = "") -> EventFrame:
    if d_max <= 0:
        raise ValueError("d_max must be positive")
    return EventFrame(np.maximum(0.0, 1.0 - distance / d_max), window_id)


def event_frame(window: EventWindow, d_max: float = D_MAX, radius: int = 1,
                min_neighbors: int = 1, window_id: str = "") -> EventFrame:
    mask = fill(denoise(accumulate(window), radius, min_neighbors))
    return to_intensity(distance_surface(mask, d_max), d_max, window_id)
