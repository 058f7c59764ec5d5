"""Run configuration: a plain key=value file merged with command-line overrides."""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Bad configuration (unknown key, unparsable or out-of-range value)."""


def _ints(text):
    parts = [p for p in str(text).replace(",", " ").split() if p]
    return tuple(int(p) for p in parts)


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class RunConfig:
    # encoder
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
    # training
    alpha: float = 0.1
    lr: float = 0.05
    epochs: int = 20
    batch: int = 8
    pos_radius_m: float = 35.0
    neg_radius_m: float = 75.0
    # frames, retrieval, runtime
    window_us: int = 25_000
    d_max: float = 12.0
    top_n: int = 30
    threads: int = 1
    seed: int = 42

    def __post_init__(self):
        positive = ("input_width", "input_height", "K", "D", "cls_dim", "cbp_dim", "alpha",
                    "batch", "pos_radius_m", "neg_radius_m", "window_us", "d_max", "top_n", "threads")
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lr < 0 or self.epochs < 0:
            raise ConfigError("lr and epochs must be non-negative")
        if self.neg_radius_m <= self.pos_radius_m:
            raise ConfigError("neg_radius_m must exceed pos_radius_m")
        if not self.backbone_channels or min(self.backbone_channels) < 1:
            raise ConfigError("backbone_channels must list positive channel counts")
        if not 0.0 <= self.vlad_floor < 1.0:
            raise ConfigError(f"vlad_floor must be in [0, 1), got {self.vlad_floor}")
        if self.cbp_dim & (self.cbp_dim - 1):
            raise ConfigError(f"cbp_dim must be a power of two, got {self.cbp_dim}")

    @classmethod
    def keys(cls):
        return [f.name for f in fields(cls)]

    def with_values(self, values: dict[str, str]) -> RunConfig:
        """Copy with string values parsed against each key's type."""
        types = {f.name: type(f.default) for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown config key {key!r}; known keys: {', '.join(self.keys())}")
            t = types[key]
            try:
                if t is tuple:
                    parsed[key] = _ints(raw)
                elif t is bool:
                    parsed[key] = _bool(raw)
                else:
                    parsed[key] = t(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
        return replace(self, **parsed)

    def model_config(self) -> ModelConfig:
        return ModelConfig(input_width=self.input_width, input_height=self.input_height,
                           backbone_channels=tuple(self.backbone_channels), K=self.K, D=self.D,
                           cls_dim=self.cls_dim, cbp_dim=self.cbp_dim, hidden=tuple(self.hidden),
                           signed_sqrt=self.signed_sqrt, vlad_floor=self.vlad_floor, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.alpha, self.lr, self.epochs, self.batch, self.pos_radius_m,
                           self.neg_radius_m, self.seed)

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(map(str, v))
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def parse_config_text(text: str) -> dict[str, str]:
    """key=value lines; '#' starts a comment, blank lines are ignored."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"config line {lineno}: empty key")
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then overrides; later sources win."""
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cfg.with_values(parse_config_text(text))
    if overrides:
        cfg = cfg.with_values({k: str(v) for k, v in overrides.items() if v is not None})
    return cfg
