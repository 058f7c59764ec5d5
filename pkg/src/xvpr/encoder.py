"""Per-modality convolutional backbones and the shared retrieval/classification heads."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor

MODALITY_CHANNELS = {"event": 1, "image": 3}


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    # He-uniform bound: keeps activation scale roughly constant through relu layers
    s = np.sqrt(6.0 / fan_in)
    return rng.uniform(-s, s, size=shape)


def conv_params(rng, prefix, c_in, c_out, k=3):
    return {
        f"{prefix}.weight": Parameter(uniform_init(rng, (c_out, c_in, k, k), c_in * k * k),
                                      name=f"{prefix}.weight"),
        f"{prefix}.bias": Parameter(np.zeros(c_out), name=f"{prefix}.bias"),
    }


def fc_params(rng, prefix, n_in, n_out):
    return {
        f"{prefix}.weight": Parameter(uniform_init(rng, (n_out, n_in), n_in), name=f"{prefix}.weight"),
        f"{prefix}.bias": Parameter(np.zeros(n_out), name=f"{prefix}.bias"),
    }


def conv_stack(params, prefix, x, n_layers, stride):
    for i in range(n_layers):
        x = ad.relu(ad.conv2d(x, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"],
                              stride=stride, pad=1))
    return x


def standardize(x, eps: float = 1e-6):
    """Zero-mean, unit-variance per sample and channel; flat inputs map to zero."""
    x = ad.as_tensor(x)
    centred = x - ad.mean(x, axis=(-2, -1), keepdims=True)
    var = ad.mean(centred * centred, axis=(-2, -1), keepdims=True)
    return centred / ad.sqrt(var + eps)


def backbone_forward(params, x, modality: str, n_layers: int):
    """Standardised input through the strided conv+relu stack of one modality.

    x is N×C×H×W or C×H×W. Standardising first puts sparse event frames and
    dense images on a common scale before the modality-specific layers.
    """
    if modality not in MODALITY_CHANNELS:
        raise ValueError(f"unknown modality {modality!r}")
    x = ad.as_tensor(x)
    c = x.shape[-3]
    if c != MODALITY_CHANNELS[modality]:
        raise ValueError(f"{modality} backbone expects {MODALITY_CHANNELS[modality]} channels, got {c}")
    return conv_stack(params, f"backbone.{modality}", standardize(x), n_layers, stride=2)


def netvlad_aggregate(local, centers, assign_weight, assign_bias, block_floor=0.0):
    """NetVLAD over local features ``local`` (D×M, or B×D×M).

    Soft assignment a_k(m) = softmax_k(w_k·x_m + b_k); block k is
    Σ_m a_k(m)(x_m − c_k). Blocks are L2-normalised individually, then the
    flattened K·D vector is L2-normalised. Zero vectors stay zero. A positive
    ``block_floor`` keeps blocks shorter than it from being stretched to unit length.
    """
    local = ad.as_tensor(local)
    centers = ad.as_tensor(centers)
    single = local.ndim == 2
    if single:
        local = ad.reshape(local, (1,) + local.shape)
    B, D, M = local.shape
    K, Dc = centers.shape
    if Dc != D:
        raise ValueError(f"netvlad: local features have D={D}, clusters have D={Dc}")
    if assign_weight.shape != (K, D) or assign_bias.shape != (K,):
        raise ValueError(f"netvlad: assignment parameters must be ({K},{D}) and ({K},)")
    if M < 1:
        raise ValueError("netvlad: need at least one local feature")
    logits = ad.add(ad.matmul(assign_weight, local), ad.reshape(assign_bias, (K, 1)))  # B×K×M
    a = ad.softmax(logits, axis=1)
    weighted = ad.matmul(a, ad.transpose(local, (0, 2, 1)))  # B×K×D
    mass = ad.reshape(ad.tsum(a, axis=2), (B, K, 1))
    resid = ad.sub(weighted, ad.mul(mass, centers))
    v = ad.l2_normalize(resid, axis=2, floor=block_floor)
    v = ad.l2_normalize(ad.reshape(v, (B, K * D)), axis=1)
    return ad.reshape(v, (K * D,)) if single else v


def retrieval_local_features(params, fmap, vlad_floor=0.0):
    """B×D×M local descriptors for NetVLAD; unit length when ``vlad_floor`` > 0."""
    x = conv_stack(params, "retr", fmap, 3, stride=1)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    B, D, h, w = x.shape
    x = ad.reshape(x, (B, D, h * w))
    return ad.l2_normalize(x, axis=1) if vlad_floor > 0 else x


def retrieval_head(params, fmap, vlad_floor=0.0):
    """3 conv layers then NetVLAD.

    ``vlad_floor`` > 0 normalises each local feature and floors each block norm
    at that value, so a cluster that receives almost no assignment mass adds a
    near-zero block instead of a unit-length block of noise.
    """
    return netvlad_aggregate(retrieval_local_features(params, fmap, vlad_floor),
                             params["netvlad.centers"], params["netvlad.assign_weight"],
                             params["netvlad.assign_bias"], block_floor=vlad_floor)


def cls_head(params, fmap):
    x = conv_stack(params, "cls", fmap, 3, stride=1)
    if x.ndim == 3:
        x = ad.reshape(x, (1,) + x.shape)
    flat = ad.reshape(x, (x.shape[0], -1))
    return ad.linear(flat, params["cls.fc.weight"], params["cls.fc.bias"])


def init_encoder(rng, backbone_channels, K, D, cls_dim, cls_channels, feature_hw):
    """Create all encoder parameters in a fixed order for a given RNG."""
    params: dict[str, Tensor] = {}
    for modality, c_in in MODALITY_CHANNELS.items():
        chans = [c_in, *backbone_channels]
        for i in range(len(backbone_channels)):
            params.update(conv_params(rng, f"backbone.{modality}.conv{i}", chans[i], chans[i + 1]))
    db = backbone_channels[-1]
    for i, (a, b) in enumerate([(db, D), (D, D), (D, D)]):
        params.update(conv_params(rng, f"retr.conv{i}", a, b))
    centers = rng.uniform(0.0, 1.0, size=(K, D)) / np.sqrt(D)
    params["netvlad.centers"] = Parameter(centers, name="netvlad.centers")
    params["netvlad.assign_weight"] = Parameter(2.0 * centers, name="netvlad.assign_weight")
    params["netvlad.assign_bias"] = Parameter(-(centers ** 2).sum(1), name="netvlad.assign_bias")
    for i, (a, b) in enumerate([(db, cls_channels), (cls_channels, cls_channels),
                                (cls_channels, cls_channels)]):
        params.update(conv_params(rng, f"cls.conv{i}", a, b))
    h, w = feature_hw
    params.update(fc_params(rng, "cls.fc", cls_channels * h * w, cls_dim))
    return params


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10) -> np.ndarray:
    """Plain Lloyd iterations from a seeded random subset; empty clusters keep their center."""
    points = np.asarray(points, dtype=np.float64)
    if len(points) < k:
        raise ValueError(f"k-means needs at least {k} points, got {len(points)}")
    centers = points[rng.choice(len(points), size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None]) ** 2).sum(-1)
        label = d2.argmin(1)
        for j in range(k):
            members = points[label == j]
            if len(members):
                centers[j] = members.mean(0)
    return centers


def init_netvlad_from_features(params, local_features: np.ndarray, rng, iters: int = 10) -> None:
    """Set clusters by k-means over local features (M×D) and match the assignment sharpness."""
    K = params["netvlad.centers"].shape[0]
    centers = kmeans(local_features, K, rng, iters)
    d2 = ((local_features[:, None, :] - centers[None]) ** 2).sum(-1)
    d2.sort(axis=1)
    gap = float(np.mean(d2[:, 1] - d2[:, 0])) if K > 1 else 1.0
    alpha = np.log(100.0) / gap if gap > 0 else 1.0
    params["netvlad.centers"].data[...] = centers
    params["netvlad.assign_weight"].data[...] = 2.0 * alpha * centers
    params["netvlad.assign_bias"].data[...] = -alpha * (centers ** 2).sum(1)
