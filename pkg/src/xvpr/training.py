"""Triplet mining, the retrieval and classification losses, and the SGD loop."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .events import DataError, SampleRecord, haversine
from .evaluation import recall_at_n, run_queries
from .model import CrossModalNet, ModelConfig
from .retrieval import build_db_from_arrays, load_batch

log = logging.getLogger(__name__)

LOG_HEADER = "epoch,mean_triplet,mean_cls,mean_total,val_recall1"


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 0.1
    lr: float = 0.05
    epochs: int = 20
    batch: int = 8
    pos_radius_m: float = 35.0
    neg_radius_m: float = 75.0
    seed: int = 42

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("triplet margin alpha must be positive")
        if self.neg_radius_m <= self.pos_radius_m:
            raise ValueError("neg_radius_m must exceed pos_radius_m")
        if self.batch < 1 or self.epochs < 0 or self.lr < 0:
            raise ValueError("batch must be >= 1, epochs and lr non-negative")


@dataclass(frozen=True)
class Triplet:
    anchor: str
    positive: str
    negative: str


def mine_triplets(records: list[SampleRecord], config: TrainConfig, epoch_seed: int = 0,
                  split: str | None = "train") -> list[Triplet]:
    """One triplet per anchor event sample with a valid positive, uniformly sampled."""
    pool = [r for r in records if split is None or r.split == split]
    anchors = [r for r in pool if r.modality == "event"]
    images = [r for r in pool if r.modality == "image"]
    if not anchors or not images:
        return []
    alat = np.array([r.geotag.latitude for r in anchors])[:, None]
    alon = np.array([r.geotag.longitude for r in anchors])[:, None]
    ilat = np.array([r.geotag.latitude for r in images])[None]
    ilon = np.array([r.geotag.longitude for r in images])[None]
    dist = haversine(alat, alon, ilat, ilon)
    rng = np.random.default_rng([config.seed, epoch_seed])
    out = []
    skipped = 0
    for i, a in enumerate(anchors):
        pos = np.flatnonzero(dist[i] < config.pos_radius_m)
        neg = np.flatnonzero(dist[i] > config.neg_radius_m)
        if len(pos) == 0 or len(neg) == 0:
            skipped += 1
            continue
        out.append(Triplet(a.id, images[rng.choice(pos)].id, images[rng.choice(neg)].id))
    if skipped:
        log.warning("skipped %d anchors without a valid positive or negative", skipped)
    order = rng.permutation(len(out))
    return [out[k] for k in order]


def euclidean(a, b):
    return ad.sqrt(ad.tsum((a - b) * (a - b), axis=-1))


def triplet_loss(fa, fp, fn, alpha: float = 0.1):
    """max(d(a, p) − d(a, n) + α, 0) per row (or for single vectors)."""
    fa, fp, fn = ad.as_tensor(fa), ad.as_tensor(fp), ad.as_tensor(fn)
    if not fa.shape == fp.shape == fn.shape:
        raise ValueError(f"triplet descriptors differ in shape: {fa.shape}, {fp.shape}, {fn.shape}")
    return ad.maximum0(euclidean(fa, fp) - euclidean(fa, fn) + alpha)


def cls_loss(s_ap, s_an, eps: float = 1e-12):
    """BCE(S_ap, 1) + BCE(S_an, 0) with scores clamped to [eps, 1 − eps]."""
    s_ap = ad.clip(ad.as_tensor(s_ap), eps, 1 - eps)
    s_an = ad.clip(ad.as_tensor(s_an), eps, 1 - eps)
    return -ad.log(s_ap) - ad.log(1.0 - s_an)


def total_loss(l_triplet, l_cls):
    return ad.add(l_triplet, l_cls)


def sgd_step(params, lr: float) -> None:
    """value ← value − lr·grad for every parameter, then zero the gradients."""
    params = list(params.values()) if isinstance(params, dict) else list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise FloatingPointError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        p.data = p.data - lr * p.grad
        p.grad = np.zeros_like(p.data)


def triplet_batch_loss(model: CrossModalNet, anchors, positives, negatives, alpha):
    """Mean (triplet, cls, total) losses over a batch of N×C×H×W arrays."""
    n = len(anchors)
    ra, ca = model.encode(anchors, "event")
    r_img, c_img = model.encode(np.concatenate([positives, negatives]), "image")
    rp, rn = r_img[:n], r_img[n:]
    cp, cn = c_img[:n], c_img[n:]
    lt = triplet_loss(ra, rp, rn, alpha)
    s_ap = model.similarity(ca, cp)
    s_an = model.similarity(ca, cn)
    lc = cls_loss(s_ap, s_an)
    scale = 1.0 / n
    return ad.tsum(lt) * scale, ad.tsum(lc) * scale, ad.tsum(total_loss(lt, lc)) * scale


class SampleCache:
    """All samples of a manifest loaded once as model-sized arrays, keyed by id."""

    def __init__(self, records, manifest_path, model_config: ModelConfig):
        self.arrays: dict[str, np.ndarray] = {}
        c = model_config
        for modality, channels in (("event", 1), ("image", 3)):
            recs = [r for r in records if r.modality == modality]
            if recs:
                batch = load_batch(recs, manifest_path, channels, c.input_width, c.input_height)
                self.arrays.update(zip([r.id for r in recs], batch))

    def stack(self, ids):
        return np.stack([self.arrays[i] for i in ids])

    def by_modality(self, records):
        out: dict[str, dict] = {"event": {}, "image": {}}
        for r in records:
            out[r.modality][r.id] = self.arrays[r.id]
        return out


def validation_recall(model, records, cache, manifest_path) -> float:
    val = [r for r in records if r.split == "val"]
    images = [r for r in val if r.modality == "image"]
    queries = [r for r in val if r.modality == "event"]
    if not images or not queries:
        return float("nan")
    fp = model.fingerprint()
    db = build_db_from_arrays(images, cache.stack([r.id for r in images]), model, fp)
    results = run_queries(db, queries, manifest_path, model, "hybrid",
                          arrays=cache.by_modality(queries))
    table = recall_at_n(results, dict(zip(db.ids, db.geotags)), {q.id: q.geotag for q in queries},
                        ns=(1,))
    return table[("all", 1)]


def train(records: list[SampleRecord], manifest_path, config: TrainConfig,
          model_config: ModelConfig | None = None, model: CrossModalNet | None = None,
          on_epoch=None):
    """End-to-end SGD on summed triplet + classification loss.

    Returns (best model by validation Recall@1, loss-log rows). Without a
    validation split the final model is returned.
    """
    model_config = model_config or ModelConfig(seed=config.seed)
    model = model or CrossModalNet(model_config)
    model_config = model.config
    train_recs = [r for r in records if r.split == "train"]
    if not mine_triplets(records, config, 0):
        raise DataError("no training triplets: need event anchors with positives and negatives")
    cache = SampleCache([r for r in records if r.split in ("train", "val")], manifest_path, model_config)

    warm_rng = np.random.default_rng([config.seed, 7])
    ev = [r.id for r in train_recs if r.modality == "event"]
    im = [r.id for r in train_recs if r.modality == "image"]
    ev = [ev[i] for i in sorted(warm_rng.choice(len(ev), size=min(32, len(ev)), replace=False))]
    im = [im[i] for i in sorted(warm_rng.choice(len(im), size=min(32, len(im)), replace=False))]
    model.init_clusters(cache.stack(ev), cache.stack(im))

    rows = []
    best_score, best_state = -np.inf, model.state()
    for epoch in range(1, config.epochs + 1):
        triplets = mine_triplets(records, config, epoch)
        sums = np.zeros(3)
        for s in range(0, len(triplets), config.batch):
            chunk = triplets[s : s + config.batch]
            lt, lc, tot = triplet_batch_loss(
                model, cache.stack([t.anchor for t in chunk]), cache.stack([t.positive for t in chunk]),
                cache.stack([t.negative for t in chunk]), config.alpha)
            tot.backward()
            sgd_step(model.params, config.lr)
            sums += np.array([lt.item(), lc.item(), tot.item()]) * len(chunk)
        means = sums / max(1, len(triplets))
        recall = validation_recall(model, records, cache, manifest_path)
        rows.append((epoch, *means, recall))
        log.info("epoch %d: triplet %.4f cls %.4f total %.4f val R@1 %.3f", epoch, *means, recall)
        if on_epoch:
            on_epoch(epoch, rows[-1], model)
        score = recall if np.isfinite(recall) else epoch
        if score > best_score:
            best_score, best_state = score, model.state()
    best = CrossModalNet.from_state({k: np.array(v) for k, v in best_state.items()})
    return best, rows


def format_log(rows) -> str:
    lines = [LOG_HEADER]
    lines += [f"{int(e)},{float(a)!r},{float(b)!r},{float(c)!r},{float(d)!r}" for e, a, b, c, d in rows]
    return "\n".join(lines) + "\n"
