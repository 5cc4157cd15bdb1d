"""Experiment configuration: flat ``section.key=value`` text, lossless round-trip.

The canonical text form lists every key in a fixed order, one per line; blank
lines and ``#`` comments are ignored on parse. Unknown keys and unparsable
values raise ``ConfigError`` naming the key. The output directory is
deliberately not part of the config (it comes from the CLI), so metrics files
that embed the resolved config are byte-identical across output locations.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import ConfigError


@dataclass
class DataConfig:
    extents: tuple = (32, 32, 32)
    num_classes: int = 3
    train_count: int = 24
    val_count: int = 8
    noise_sigma: float = 0.03
    intensity_jitter: float = 0.08


@dataclass
class BackboneSection:
    in_channels: int = 1
    base_channels: int = 8
    d_i: int = 64
    d: int = 16
    d_q: int = 32
    depth: int = 5


@dataclass
class SmgSection:
    enabled: bool = True
    num_queries: int = 32
    num_heads: int = 4
    similarity: str = "cosine"
    filtering: bool = True
    schedule: bool = True
    fixed_tau: float = 0.5
    background_overlap: bool = True
    scales: tuple = ()  # empty = the backbone's three coarsest strides


@dataclass
class IplSection:
    enabled: bool = True
    pooling: str = "mass"
    mask_resize: str = "trilinear"  # "nearest" is the ablation alternative


@dataclass
class LossSection:
    alpha: float = 0.05
    epsilon: float = 1e-6
    clamp: float = 1e-7
    class_reduce: str = "mean"


@dataclass
class OptimSection:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-5
    cosine: bool = True


@dataclass
class TrainSection:
    epochs: int = 200
    val_every: int = 1
    checkpoint_every: int = 0  # 0 = final checkpoint only


@dataclass
class ExperimentConfig:
    seed: int = 1234
    data: DataConfig = field(default_factory=DataConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    smg: SmgSection = field(default_factory=SmgSection)
    ipl: IplSection = field(default_factory=IplSection)
    loss: LossSection = field(default_factory=LossSection)
    optim: OptimSection = field(default_factory=OptimSection)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self):
        d = self.data
        b = self.backbone
        stride = 2 ** b.depth
        if len(d.extents) != 3 or any(n <= 0 for n in d.extents):
            raise ConfigError(f"data.extents must be three positive values, got {d.extents}")
        if any(n % stride for n in d.extents):
            raise ConfigError(f"data.extents {d.extents} not divisible by backbone stride {stride}")
        if self.smg.enabled and self.smg.num_queries <= d.num_classes:
            raise ConfigError(
                f"smg.num_queries ({self.smg.num_queries}) must exceed data.num_classes ({d.num_classes})"
            )
        if self.smg.scales:
            allowed = {stride, stride // 2, stride // 4}
            bad = [s for s in self.smg.scales if s not in allowed]
            if bad:
                raise ConfigError(f"smg.scales {bad} not among backbone taps {sorted(allowed)}")
        if d.train_count < 1 or d.val_count < 0:
            raise ConfigError("data.train_count must be >= 1 and data.val_count >= 0")
        if self.train.epochs < 0:
            raise ConfigError("train.epochs must be >= 0")
        return self

    def resolved_scales(self) -> list[int]:
        if self.smg.scales:
            return sorted(self.smg.scales, reverse=True)
        s = 2 ** self.backbone.depth
        return [s, s // 2, s // 4]

    def to_text(self) -> str:
        lines = []
        for key, (getter, _setter, encode, _decode) in _FIELDS.items():
            lines.append(f"{key}={encode(getter(self))}")
        return "\n".join(lines) + "\n"

    def apply(self, key: str, raw: str):
        entry = _FIELDS.get(key)
        if entry is None:
            raise ConfigError(f"unknown config key: {key}")
        _getter, setter, _encode, decode = entry
        try:
            setter(self, decode(raw))
        except ConfigError:
            raise
        except Exception as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        return self

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, _, raw = line.partition("=")
            cfg.apply(key.strip(), raw.strip())
        return cfg


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _int_tuple(raw: str) -> tuple:
    raw = raw.strip()
    if not raw:
        return ()
    return tuple(int(p) for p in raw.split(","))


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def _scalar(section: str, name: str, decode):
    if section:
        getter = lambda c, s=section, n=name: getattr(getattr(c, s), n)
        setter = lambda c, v, s=section, n=name: setattr(getattr(c, s), n, v)
    else:
        getter = lambda c, n=name: getattr(c, n)
        setter = lambda c, v, n=name: setattr(c, n, v)
    return getter, setter, _fmt, decode


_FIELDS = {
    "seed": _scalar("", "seed", int),
    "data.extents": _scalar("data", "extents", _int_tuple),
    "data.num_classes": _scalar("data", "num_classes", int),
    "data.train_count": _scalar("data", "train_count", int),
    "data.val_count": _scalar("data", "val_count", int),
    "data.noise_sigma": _scalar("data", "noise_sigma", float),
    "data.intensity_jitter": _scalar("data", "intensity_jitter", float),
    "backbone.in_channels": _scalar("backbone", "in_channels", int),
    "backbone.base_channels": _scalar("backbone", "base_channels", int),
    "backbone.d_i": _scalar("backbone", "d_i", int),
    "backbone.d": _scalar("backbone", "d", int),
    "backbone.d_q": _scalar("backbone", "d_q", int),
    "backbone.depth": _scalar("backbone", "depth", int),
    "smg.enabled": _scalar("smg", "enabled", _bool),
    "smg.num_queries": _scalar("smg", "num_queries", int),
    "smg.num_heads": _scalar("smg", "num_heads", int),
    "smg.similarity": _scalar("smg", "similarity", str),
    "smg.filtering": _scalar("smg", "filtering", _bool),
    "smg.schedule": _scalar("smg", "schedule", _bool),
    "smg.fixed_tau": _scalar("smg", "fixed_tau", float),
    "smg.background_overlap": _scalar("smg", "background_overlap", _bool),
    "smg.scales": _scalar("smg", "scales", _int_tuple),
    "ipl.enabled": _scalar("ipl", "enabled", _bool),
    "ipl.pooling": _scalar("ipl", "pooling", str),
    "ipl.mask_resize": _scalar("ipl", "mask_resize", str),
    "loss.alpha": _scalar("loss", "alpha", float),
    "loss.epsilon": _scalar("loss", "epsilon", float),
    "loss.clamp": _scalar("loss", "clamp", float),
    "loss.class_reduce": _scalar("loss", "class_reduce", str),
    "optim.lr": _scalar("optim", "lr", float),
    "optim.momentum": _scalar("optim", "momentum", float),
    "optim.weight_decay": _scalar("optim", "weight_decay", float),
    "optim.cosine": _scalar("optim", "cosine", _bool),
    "train.epochs": _scalar("train", "epochs", int),
    "train.val_every": _scalar("train", "val_every", int),
    "train.checkpoint_every": _scalar("train", "checkpoint_every", int),
}
