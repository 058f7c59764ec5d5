"""Compact bilinear pooling of two descriptors and the similarity classifier."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .encoder import fc_params


@dataclass(frozen=True)
class CountSketchParams:
    n: int
    m: int
    index: np.ndarray  # h: [n] -> [m]
    sign: np.ndarray  # s: [n] -> {-1, +1}
    seed: int = 0

    def __post_init__(self):
        if self.index.shape != (self.n,) or self.sign.shape != (self.n,):
            raise ValueError("sketch index/sign arrays must have length n")
        if self.index.min(initial=0) < 0 or self.index.max(initial=0) >= self.m:
            raise ValueError("sketch index out of range")
        if not np.all(np.abs(self.sign) == 1.0):
            raise ValueError("sketch signs must be -1 or +1")
        self.index.setflags(write=False)
        self.sign.setflags(write=False)


def make_sketch(n: int, m: int, seed: int) -> CountSketchParams:
    rng = np.random.default_rng(seed)
    index = rng.integers(0, m, size=n)
    sign = rng.choice(np.array([-1.0, 1.0]), size=n)
    return CountSketchParams(n, m, index.astype(np.int64), sign, seed)


def count_sketch(v, params: CountSketchParams):
    return ad.count_sketch(v, params.index, params.sign, params.m)


def cbp_raw(u, v, pu: CountSketchParams, pv: CountSketchParams):
    """Circular convolution of the two count sketches (frequency-domain product)."""
    if pu.m != pv.m:
        raise ValueError(f"sketch output dims differ: {pu.m} vs {pv.m}")
    return ad.circular_conv(count_sketch(u, pu), count_sketch(v, pv))


def cbp_fuse(u, v, pu, pv, signed_sqrt: bool = True):
    fused = cbp_raw(u, v, pu, pv)
    if signed_sqrt:
        fused = ad.signed_sqrt(fused)
    return ad.l2_normalize(fused, axis=-1)


def init_classifier(rng, m: int, hidden=(512, 128)):
    widths = [m, *hidden, 1]
    params = {}
    for i in range(len(widths) - 1):
        params.update(fc_params(rng, f"mlp.fc{i}", widths[i], widths[i + 1]))
    return params


def mlp_logit(fused, params, n_layers: int = 3):
    x = fused
    for i in range(n_layers):
        x = ad.linear(x, params[f"mlp.fc{i}.weight"], params[f"mlp.fc{i}.bias"])
        if i < n_layers - 1:
            x = ad.relu(x)
    return ad.reshape(x, x.shape[:-1])


def mlp_similarity(fused, params, n_layers: int = 3):
    """Similarity score in (0, 1) for each fused vector."""
    fused = ad.as_tensor(fused)
    expect = params["mlp.fc0.weight"].shape[1]
    if fused.shape[-1] != expect:
        raise ValueError(f"classifier expects {expect}-dim input, got {fused.shape[-1]}")
    return ad.sigmoid(mlp_logit(fused, params, n_layers))
