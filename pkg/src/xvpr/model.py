"""The full cross-modal network: parameters, forward passes and checkpoints."""
from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .encoder import (backbone_forward, cls_head, init_encoder,
                      init_netvlad_from_features, retrieval_head,
                      retrieval_local_features)
from .fusion import CountSketchParams, cbp_fuse, init_classifier, make_sketch, mlp_similarity


@dataclass(frozen=True)
class ModelConfig:
    input_width: int = 64
    input_height: int = 48
    backbone_channels: tuple = (16, 32, 32)
    K: int = 8
    D: int = 64
    cls_dim: int = 64
    cbp_dim: int = 1024
    hidden: tuple = (512, 128)
    signed_sqrt: bool = True
    vlad_floor: float = 0.0
    seed: int = 42

    def __post_init__(self):
        if self.cbp_dim < 1 or self.cbp_dim & (self.cbp_dim - 1):
            raise ValueError(f"cbp_dim must be a power of two, got {self.cbp_dim}")
        for name in ("input_width", "input_height", "K", "D", "cls_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not self.backbone_channels or min(self.backbone_channels) < 1:
            raise ValueError("backbone_channels must be a non-empty list of positive ints")
        if not 0.0 <= self.vlad_floor < 1.0:
            raise ValueError(f"vlad_floor must be in [0, 1), got {self.vlad_floor}")

    @property
    def feature_hw(self):
        h, w = self.input_height, self.input_width
        for _ in self.backbone_channels:
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w

    def to_arrays(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f"config.{f.name}"] = np.atleast_1d(np.asarray(v, dtype=np.float64))
        return out

    @classmethod
    def from_arrays(cls, arrays):
        kw = {}
        for f in fields(cls):
            v = arrays[f"config.{f.name}"]
            if f.name in ("backbone_channels", "hidden"):
                kw[f.name] = tuple(int(x) for x in v)
            elif f.name == "signed_sqrt":
                kw[f.name] = bool(v[0])
            elif f.name == "vlad_floor":
                kw[f.name] = float(v[0])
            else:
                kw[f.name] = int(v[0])
        return cls(**kw)


class CrossModalNet:
    def __init__(self, config: ModelConfig | None = None):
        self.config = config = config or ModelConfig()
        rng = np.random.default_rng(config.seed)
        self.params = init_encoder(rng, config.backbone_channels, config.K, config.D,
                                   config.cls_dim, config.D, config.feature_hw)
        self.params.update(init_classifier(rng, config.cbp_dim, config.hidden))
        self.sketch_query = make_sketch(config.cls_dim, config.cbp_dim, config.seed + 1001)
        self.sketch_db = make_sketch(config.cls_dim, config.cbp_dim, config.seed + 2002)

    # ----------------------------------------------------------------- forward
    def backbone(self, x, modality):
        x = ad.as_tensor(x)
        expect = (self.config.input_height, self.config.input_width)
        if tuple(x.shape[-2:]) != expect:
            raise ValueError(f"input is {x.shape[-1]}x{x.shape[-2]}, model expects "
                             f"{expect[1]}x{expect[0]}")
        return backbone_forward(self.params, x, modality, len(self.config.backbone_channels))

    def retrieval(self, fmap):
        return retrieval_head(self.params, fmap, self.config.vlad_floor)

    def cls(self, fmap):
        return cls_head(self.params, fmap)

    def encode(self, x, modality):
        """(retrieval descriptor, classification descriptor) for a batch N×C×H×W."""
        f = self.backbone(x, modality)
        return self.retrieval(f), self.cls(f)

    def fuse(self, query_cls, db_cls):
        return cbp_fuse(query_cls, db_cls, self.sketch_query, self.sketch_db,
                        signed_sqrt=self.config.signed_sqrt)

    def similarity(self, query_cls, db_cls):
        return mlp_similarity(self.fuse(query_cls, db_cls), self.params, len(self.config.hidden) + 1)

    def local_features(self, x, modality):
        with ad.no_grad():
            d = retrieval_local_features(self.params, self.backbone(x, modality),
                                         self.config.vlad_floor).data
        return d.transpose(0, 2, 1).reshape(-1, d.shape[1])

    def init_clusters(self, event_batch, image_batch, iters=10):
        feats = [self.local_features(event_batch, "event"), self.local_features(image_batch, "image")]
        rng = np.random.default_rng(self.config.seed + 3003)
        init_netvlad_from_features(self.params, np.concatenate(feats), rng, iters)

    def parameters(self):
        return list(self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    # -------------------------------------------------------------- persistence
    def state(self) -> dict[str, np.ndarray]:
        out = self.config.to_arrays()
        out.update({name: p.data for name, p in self.params.items()})
        for tag, sk in (("query", self.sketch_query), ("db", self.sketch_db)):
            out[f"sketch.{tag}.index"] = sk.index.astype(np.float64)
            out[f"sketch.{tag}.sign"] = sk.sign
        return out

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.state())

    def fingerprint(self) -> bytes:
        return checkpoint.fingerprint(self.to_bytes())

    def save(self, path) -> bytes:
        blob = self.to_bytes()
        Path(path).write_bytes(blob)
        return blob

    @classmethod
    def from_state(cls, state):
        missing = [k for k in ("sketch.query.index", "sketch.query.sign", "sketch.db.index",
                               "sketch.db.sign") if k not in state]
        try:
            config = ModelConfig.from_arrays(state)
        except KeyError as exc:
            missing.append(exc.args[0])
        if missing:
            raise checkpoint.CheckpointError(f"checkpoint is missing {', '.join(missing)}")
        net = cls(config)
        for name, p in net.params.items():
            if name not in state:
                raise checkpoint.CheckpointError(f"checkpoint is missing parameter {name!r}")
            if state[name].shape != p.shape:
                raise checkpoint.CheckpointError(f"parameter {name!r} has shape {state[name].shape}, "
                                                 f"expected {p.shape}")
            p.data = state[name].copy()
            p.grad = np.zeros_like(p.data)
        c = net.config
        for tag in ("query", "db"):
            sk = CountSketchParams(c.cls_dim, c.cbp_dim, state[f"sketch.{tag}.index"].astype(np.int64),
                                   state[f"sketch.{tag}.sign"].copy())
            setattr(net, f"sketch_{tag}", sk)
        return net

    @classmethod
    def load(cls, path):
        blob = Path(path).read_bytes()
        net = cls.from_state(checkpoint.loads(blob))
        return net, checkpoint.fingerprint(blob)

    def copy(self):
        return CrossModalNet.from_state({k: np.array(v) for k, v in self.state().items()})

