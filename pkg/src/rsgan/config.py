"""Run configuration: one YAML mapping with flat dotted keys.

Example::

    seed: 0
    data.n_drr_phantoms: 2
    style.gamma: 0.7
    train.lr: 0.0002
    train.net.image_size: 64
    metrics.region: lung_minus_bone

Every key has a default; unknown keys are rejected.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path

import yaml

from .losses import BoneMaskConfig, LossWeights
from .nets import NetConfig
from .phantom import DomainStyle
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DataConfig:
    n_drr_phantoms: int = 2
    n_cxr_train_phantoms: int = 2
    n_cxr_test_phantoms: int = 1
    n_views: int = 42
    volume_size: int = 64
    detector_size: int = 64
    n_ribs: int = 6
    ring_radius: int = 5
    # phantom seeds are offset per split so the splits never share anatomy
    drr_seed_offset: int = 0
    cxr_train_seed_offset: int = 100
    cxr_test_seed_offset: int = 200

    def __post_init__(self):
        for k in ("n_drr_phantoms", "n_cxr_train_phantoms", "n_cxr_test_phantoms", "n_views", "n_ribs"):
            if getattr(self, k) < 1:
                raise ConfigError(f"data.{k} must be >= 1")
        if self.volume_size < 16 or self.detector_size < 16:
            raise ConfigError("data.volume_size and data.detector_size must be >= 16")
        if not 1 <= self.ring_radius <= 5:
            raise ConfigError("data.ring_radius must lie in [1, 5]")


@dataclass(frozen=True)
class MetricsConfig:
    region: str = "lung_minus_bone"
    lpips_channels: tuple = (16, 32, 64)
    lpips_seed: int = 0
    lpips_weights: tuple | None = None

    def __post_init__(self):
        if self.region not in ("lung_minus_bone", "lung"):
            raise ConfigError(f"metrics.region must be lung_minus_bone or lung, got {self.region!r}")
        object.__setattr__(self, "lpips_channels", tuple(self.lpips_channels))
        if self.lpips_weights is not None:
            object.__setattr__(self, "lpips_weights", tuple(self.lpips_weights))


def _default_style() -> DomainStyle:
    return DomainStyle(gamma=0.7, gain=1.1, bias=-0.05, noise_sigma=0.01, blur_radius=1.0, seed=0)


def _desk_train() -> TrainConfig:
    # the published rate barely moves 64 px networks within a few thousand iterations
    return TrainConfig(lr=2e-4)


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    style: DomainStyle = field(default_factory=_default_style)
    train: TrainConfig = field(default_factory=_desk_train)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def __post_init__(self):
        self.train = self.train_config()

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def train_config(self, mode: str | None = None) -> TrainConfig:
        """TrainConfig with the run seed applied to training and network init."""
        t = self.train
        return replace(t, seed=self.seed, mode=mode or t.mode, net=replace(t.net, seed=self.seed))


# derived from the top-level seed, never set directly
_DERIVED = ("train.seed", "train.net.seed")

_NESTED = {
    "data": DataConfig, "style": DomainStyle, "train": TrainConfig, "metrics": MetricsConfig,
    "train.weights": LossWeights, "train.net": NetConfig, "train.bone_mask": BoneMaskConfig,
}


def flatten(cfg: RunConfig) -> dict:
    out = {}

    def walk(prefix, obj):
        for f in fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if is_dataclass(v):
                walk(key + ".", v)
            elif key not in _DERIVED:
                out[key] = list(v) if isinstance(v, tuple) else v

    walk("", cfg)
    return out


def _build(cls, prefix: str, flat: dict):
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        if key in _NESTED:
            kwargs[f.name] = _build(_NESTED[key], key + ".", flat)
        elif key in flat:
            kwargs[f.name] = flat[key]
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {prefix.rstrip('.') or 'config'} settings: {exc}") from exc


def from_flat(flat: dict) -> RunConfig:
    known = set(flatten(RunConfig()))
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    # start from the run defaults, which differ from the per-section class defaults
    merged = flatten(RunConfig())
    merged.update(flat)
    return _build(RunConfig, "", merged)


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read a YAML config (``None`` gives all defaults) and apply overrides."""
    flat = {}
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping of dotted keys")
        nested = [k for k, v in raw.items() if isinstance(v, dict)]
        if nested:
            raise ConfigError(f"{path}: use flat dotted keys, not nested sections ({', '.join(nested)})")
        flat.update(raw)
    flat.update(overrides or {})
    return from_flat(flat)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(flatten(cfg), sort_keys=True, default_flow_style=None)


def write_config(cfg: RunConfig, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_config(cfg))
    return path


def as_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
