from __future__ import annotations

from collections.abc import Callable, Sequence

import numpy as np

from .autodiff import Tensor


def grad_check(function: Callable, point, epsilon: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``point`` is either a single Tensor, in which case ``function(point)`` is
    evaluated, or a sequence of leaf Tensors (e.g. model parameters) that
    ``function()`` closes over and that are perturbed in place.

    The error per coordinate is |analytic − numeric| / max(1, |numeric|).
    """
    if isinstance(point, Tensor):
        leaves: Sequence[Tensor] = [point]
        call = lambda: function(point)
    else:
        leaves = list(point)
        call = function
    for t in leaves:
        t.requires_grad = True
        t.grad = np.zeros_like(t.data)
    out = call()
    if out.data.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not np.isfinite(out.data).all():
        raise FloatingPointError("grad_check: function is not finite at the point")
    out.backward()
    worst = 0.0
    for t in leaves:
        analytic = t.grad.copy()
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(call().data)
            flat[i] = orig - epsilon
            fm = float(call().data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise FloatingPointError("grad_check: non-finite evaluation under perturbation")
            numeric = (fp - fm) / (2 * epsilon)
            err = abs(analytic.reshape(-1)[i] - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst


GRADCHECK_TOLERANCE = 1e-4


def _leaf(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _jitter_biases(params, rng, scale=0.1):
    # zero biases put relu inputs exactly on the kink for some units
    for name, p in params.items():
        if name.endswith(".bias"):
            p.data = rng.normal(0.0, scale, size=p.shape)


def tiny_model(seed: int = 0):
    from .model import CrossModalNet, ModelConfig
    cfg = ModelConfig(input_width=8, input_height=8, backbone_channels=(3,), K=2, D=3, cls_dim=4,
                      cbp_dim=8, hidden=(5, 3), seed=seed)
    model = CrossModalNet(cfg)
    _jitter_biases(model.params, np.random.default_rng(seed + 1))
    return model


def layer_checks(seed: int = 0, epsilon: float = 1e-5) -> list[tuple[str, float]]:
    """(layer name, max relative gradient error) for every differentiable stage."""
    from . import autodiff as ad
    from .encoder import netvlad_aggregate
    from .fusion import cbp_fuse, init_classifier, make_sketch, mlp_similarity
    from .training import cls_loss, triplet_batch_loss, triplet_loss

    rng = np.random.default_rng(seed)
    out = []

    x, w, b = _leaf(rng, 2, 2, 6, 5), _leaf(rng, 3, 2, 3, 3), _leaf(rng, 3)
    proj = rng.normal(size=(2, 3, 3, 3))
    out.append(("conv2d", grad_check(lambda: ad.tsum(ad.conv2d(x, w, b, stride=2, pad=1) * proj),
                                     [x, w, b], epsilon)))

    x, w, b = _leaf(rng, 4, 5), _leaf(rng, 3, 5), _leaf(rng, 3)
    proj = rng.normal(size=(4, 3))
    out.append(("linear", grad_check(lambda: ad.tsum(ad.linear(x, w, b) * proj), [x, w, b], epsilon)))

    local, centers = _leaf(rng, 2, 3, 7), _leaf(rng, 4, 3)
    aw, ab = _leaf(rng, 4, 3), _leaf(rng, 4)
    proj = rng.normal(size=(2, 12))
    out.append(("netvlad", grad_check(
        lambda: ad.tsum(netvlad_aggregate(local, centers, aw, ab) * proj), [local, centers, aw, ab],
        epsilon)))

    pu, pv = make_sketch(6, 16, seed + 11), make_sketch(6, 16, seed + 12)
    u, v = _leaf(rng, 3, 6), _leaf(rng, 3, 6)
    proj = rng.normal(size=(3, 16))
    out.append(("count_sketch_fft_fusion", grad_check(
        lambda: ad.tsum(cbp_fuse(u, v, pu, pv) * proj), [u, v], epsilon)))

    mlp = init_classifier(rng, 16, (6, 4))
    _jitter_biases(mlp, rng)
    fused = rng.normal(size=(5, 16))
    out.append(("classifier", grad_check(lambda: ad.tsum(mlp_similarity(fused, mlp)),
                                         list(mlp.values()), epsilon)))

    fa, fp, fn = _leaf(rng, 6), _leaf(rng, 6), _leaf(rng, 6)
    out.append(("triplet_loss", grad_check(lambda: triplet_loss(fa, fp, fn, alpha=3.0),
                                           [fa, fp, fn], epsilon)))

    s_ap = Tensor(rng.uniform(0.2, 0.8, size=4), requires_grad=True)
    s_an = Tensor(rng.uniform(0.2, 0.8, size=4), requires_grad=True)
    out.append(("cls_loss", grad_check(lambda: ad.tsum(cls_loss(s_ap, s_an)), [s_ap, s_an],
                                       epsilon)))

    model = tiny_model(seed)
    anchors = rng.uniform(size=(2, 1, 8, 8))
    positives, negatives = rng.uniform(size=(2, 3, 8, 8)), rng.uniform(size=(2, 3, 8, 8))
    # wide margin keeps the hinge active so every parameter receives gradient
    out.append(("total_loss", grad_check(
        lambda: triplet_batch_loss(model, anchors, positives, negatives, 3.0)[2],
        model.parameters(), epsilon)))
    return out
