import numpy as np
import pytest

from xvpr.events import read_manifest
from xvpr.synth import synth_generate


def naive_conv2d(x, w, b=None, stride=1, pad=0):
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad : pad + H, pad : pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                acc = 0.0
                for c in range(C):
                    for u in range(k):
                        for v in range(k):
                            acc += xp[c, i * stride + u, j * stride + v] * w[o, c, u, v]
                out[o, i, j] = acc + (0.0 if b is None else b[o])
    return out


def brute_force_distance(mask):
    ys, xs = np.nonzero(mask)
    H, W = mask.shape
    gy, gx = np.mgrid[0:H, 0:W]
    if len(ys) == 0:
        return None
    d2 = (gy[..., None] - ys) ** 2 + (gx[..., None] - xs) ** 2
    return np.sqrt(d2.min(axis=-1).astype(np.float64))


def direct_circular_conv(a, b):
    n = len(a)
    return np.array([sum(a[j] * b[(i - j) % n] for j in range(n)) for i in range(n)])


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """20 places x 2 scenarios, written once per session."""
    root = tmp_path_factory.mktemp("synth20")
    synth_generate(root, seed=5, places=20, scenarios=("daytime", "night"))
    return root / "manifest.csv", read_manifest(root / "manifest.csv")
