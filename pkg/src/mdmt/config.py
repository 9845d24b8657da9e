"""Training configuration and its flat ``section.key=value`` text form.

Example file::

    # comments and blank lines are ignored
    train.epochs = 10
    train.lr = 0.01
    model.variant = full
    data.source = synthetic
    synth.domain_counts = 700,8900,400
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import Schema, SyntheticSpec
from .model import HyperParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    source: str = "synthetic"  # synthetic | csv | cache
    path: str = ""
    domain_col: str = "domain"
    label_cols: tuple[str, ...] = ("click", "like")
    feature_cols: tuple[str, ...] = ("user", "item")
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    split_seed: int = 0
    synth: SyntheticSpec = field(default_factory=SyntheticSpec)

    @property
    def schema(self):
        return Schema(self.domain_col, tuple(self.label_cols), tuple(self.feature_cols))


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 256
    lr: float = 1e-2
    fusion_lr: float | None = None  # defaults to lr
    optimizer: str = "adam"
    seed: int = 0
    patience: int = 3
    variant: str = "full"
    hp: HyperParams = field(default_factory=HyperParams)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError(f"train.epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"train.batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or (self.fusion_lr is not None and self.fusion_lr < 0):
            raise ConfigError("learning rates must be >= 0")
        if self.patience < 0:
            raise ConfigError(f"train.patience must be >= 0, got {self.patience}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"train.optimizer must be adam or sgd, got {self.optimizer!r}")

    @property
    def effective_fusion_lr(self):
        return self.lr if self.fusion_lr is None else self.fusion_lr


def _tuple(conv):
    def parse(s):
        s = s.strip()
        return tuple(conv(p.strip()) for p in s.split(",")) if s else ()

    return parse


def _opt_float(s):
    s = s.strip()
    return None if s in ("", "none", "None") else float(s)


def _opt_names(s):
    s = s.strip()
    return None if s in ("", "none", "None") else _tuple(str)(s)


# key -> (object path, parser)
_KEYS = {
    "train.epochs": (("epochs",), int),
    "train.batch_size": (("batch_size",), int),
    "train.lr": (("lr",), float),
    "train.fusion_lr": (("fusion_lr",), _opt_float),
    "train.optimizer": (("optimizer",), str),
    "train.seed": (("seed",), int),
    "train.patience": (("patience",), int),
    "model.variant": (("variant",), str),
    "model.embedding_dim": (("hp", "embedding_dim"), int),
    "model.hidden_dim": (("hp", "hidden_dim"), int),
    "model.expert_dim": (("hp", "expert_dim"), int),
    "model.tower_hidden": (("hp", "tower_hidden"), int),
    "model.n_shared": (("hp", "n_shared"), int),
    "data.source": (("data", "source"), str),
    "data.path": (("data", "path"), str),
    "data.domain_col": (("data", "domain_col"), str),
    "data.label_cols": (("data", "label_cols"), _tuple(str)),
    "data.feature_cols": (("data", "feature_cols"), _tuple(str)),
    "data.split": (("data", "split"), _tuple(float)),
    "data.split_seed": (("data", "split_seed"), int),
    "synth.domain_counts": (("data", "synth", "domain_counts"), _tuple(int)),
    "synth.task_count": (("data", "synth", "task_count"), int),
    "synth.vocab_sizes": (("data", "synth", "vocab_sizes"), _tuple(int)),
    "synth.field_names": (("data", "synth", "field_names"), _opt_names),
    "synth.latent_dim": (("data", "synth", "latent_dim"), int),
    "synth.rho_dom": (("data", "synth", "rho_dom"), float),
    "synth.rho_task": (("data", "synth", "rho_task"), float),
    "synth.noise": (("data", "synth", "noise"), float),
    "synth.seed": (("data", "synth", "seed"), int),
}

KNOWN_KEYS = tuple(_KEYS)


def parse_text(text):
    """Parse ``key = value`` lines into an ordered dict of strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not KEY=VALUE")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _set_path(obj, path, value):
    if len(path) == 1:
        return replace(obj, **{path[0]: value})
    child = getattr(obj, path[0])
    return replace(obj, **{path[0]: _set_path(child, path[1:], value)})


def from_flat(flat, base=None):
    """Build a :class:`TrainConfig` from string key/values over ``base``."""
    cfg = base or TrainConfig()
    for key, raw in flat.items():
        if key not in _KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        path, conv = _KEYS[key]
        try:
            value = conv(raw)
            cfg = _set_path(cfg, path, value)
        except ConfigError:
            raise
        except (ValueError, TypeError) as e:
            raise ConfigError(f"{key}: {e}") from None
    return cfg


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def to_flat(cfg):
    """Canonical string form of every key, in ``KNOWN_KEYS`` order."""
    out = {}
    for key, (path, _conv) in _KEYS.items():
        obj = cfg
        for p in path:
            obj = getattr(obj, p)
        out[key] = _fmt(obj)
    return out


def load_config(path=None, overrides=None):
    flat = parse_text(Path(path).read_text(encoding="utf-8")) if path else {}
    flat.update(overrides or {})
    return from_flat(flat)


def config_hash(cfg, exclude=("train.seed",)):
    """Short stable digest of the canonical config (seed excluded by default)."""
    flat = to_flat(cfg)
    text = "\n".join(f"{k}={v}" for k, v in flat.items() if k not in exclude)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:10]


def dump_text(cfg):
    return "".join(f"{k} = {v}\n" for k, v in to_flat(cfg).items())


__all__ = [
    "ConfigError",
    "DataConfig",
    "TrainConfig",
    "KNOWN_KEYS",
    "config_hash",
    "dump_text",
    "from_flat",
    "load_config",
    "parse_overrides",
    "parse_text",
    "to_flat",
]
