"""Flat ``key = value`` run configuration with typed defaults and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .losses import ContrastConfig, FocalConfig
from .model import SIZES, BackboneConfig
from .sampling import SamplerConfig


class ConfigError(ValueError):
    def __init__(self, key: str | None, message: str):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class RunConfig:
    global_seed: int = 0
    input_size: int = 512
    batch_size: int = 4
    lr_init: float = 1e-4
    min_lr: float = 1e-6
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.0
    stage1_epochs: int = 20
    stage2_epochs: int = 20
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    augment_stage1: bool = True
    augment_stage2: bool = True
    backbone_size: str = "small"
    dropout_rate: float = 0.1
    contrast_dim: int = 128
    head_hidden: int = 256
    temperature: float = 0.1
    normalize_embeddings: bool = True
    loss_within_image: bool = True
    loss_cross_scale: bool = True
    loss_cross_modality: bool = True
    supcon_denominator: bool = False
    anchors_per_class: int = 256
    positives_per_anchor: int = 256
    negatives_per_anchor: int = 512
    shared_pools: bool = False
    focal_alpha: float = 0.5
    focal_gamma: float = 2.0
    threshold: float = 0.5
    empty_score: float = 1.0
    jpeg_axis: tuple[float, ...] = (100, 90, 80, 70, 60)
    blur_axis: tuple[float, ...] = (3, 5, 7, 9)
    noise_axis: tuple[float, ...] = (0.002, 0.004, 0.006, 0.008, 0.010)
    resize_axis: tuple[float, ...] = (0.9, 0.8, 0.7, 0.6, 0.5)

    def __post_init__(self):
        checks = [
            ("input_size", self.input_size >= 32 and self.input_size % 32 == 0, "must be a positive multiple of 32"),
            ("batch_size", self.batch_size >= 1, "must be >= 1"),
            ("lr_init", self.lr_init > 0, "must be > 0"),
            ("min_lr", 0 <= self.min_lr <= self.lr_init, "must be in [0, lr_init]"),
            ("adam_beta1", 0 <= self.adam_beta1 < 1, "must be in [0, 1)"),
            ("adam_beta2", 0 <= self.adam_beta2 < 1, "must be in [0, 1)"),
            ("weight_decay", self.weight_decay >= 0, "must be >= 0"),
            ("stage1_epochs", self.stage1_epochs >= 1, "must be >= 1"),
            ("stage2_epochs", self.stage2_epochs >= 1, "must be >= 1"),
            ("plateau_factor", 0 < self.plateau_factor < 1, "must be in (0, 1)"),
            ("plateau_patience", self.plateau_patience >= 0, "must be >= 0"),
            ("backbone_size", self.backbone_size in SIZES, f"must be one of {sorted(SIZES)}"),
            ("dropout_rate", 0 <= self.dropout_rate < 1, "must be in [0, 1)"),
            ("contrast_dim", self.contrast_dim >= 1, "must be >= 1"),
            ("head_hidden", self.head_hidden >= 1, "must be >= 1"),
            ("temperature", self.temperature > 0, "must be > 0"),
            ("anchors_per_class", self.anchors_per_class >= 1, "must be >= 1"),
            ("positives_per_anchor", self.positives_per_anchor >= 1, "must be >= 1"),
            ("negatives_per_anchor", self.negatives_per_anchor >= 1, "must be >= 1"),
            ("focal_alpha", 0 <= self.focal_alpha <= 1, "must be in [0, 1]"),
            ("focal_gamma", self.focal_gamma >= 0, "must be >= 0"),
            ("threshold", 0 <= self.threshold <= 1, "must be in [0, 1]"),
            ("empty_score", 0 <= self.empty_score <= 1, "must be in [0, 1]"),
        ]
        for key, ok, msg in checks:
            if not ok:
                raise ConfigError(key, f"{msg}, got {getattr(self, key)!r}")
        if not (self.loss_within_image or self.loss_cross_scale or self.loss_cross_modality):
            raise ConfigError("loss_within_image", "at least one contrastive loss must be enabled")

    def backbone(self) -> BackboneConfig:
        return BackboneConfig(self.backbone_size, None, self.dropout_rate, self.contrast_dim, self.head_hidden)

    def contrast(self) -> ContrastConfig:
        return ContrastConfig(
            self.temperature,
            self.normalize_embeddings,
            self.loss_within_image,
            self.loss_cross_scale,
            self.loss_cross_modality,
            self.supcon_denominator,
        )

    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            self.anchors_per_class, self.positives_per_anchor, self.negatives_per_anchor, self.shared_pools
        )

    def focal(self) -> FocalConfig:
        return FocalConfig(self.focal_alpha, self.focal_gamma)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def dumps(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.as_dict().items())


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_DEFAULTS = RunConfig()


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def parse_value(key: str, text: str):
    if key not in _TYPES:
        raise ConfigError(key, "unknown key")
    default = getattr(_DEFAULTS, key)
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t for t in (s.strip() for s in text.split(",")) if t]
            return tuple(float(t) for t in items)
        return text
    except ValueError:
        kind = type(default).__name__ if not isinstance(default, tuple) else "list of numbers"
        raise ConfigError(key, f"expected {kind}, got {text!r}") from None


def parse_pairs(lines: Iterable[str], source: str = "config") -> dict:
    values = {}
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(None, f"{source} line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = parse_value(key, value)
    return values


def validate_config(
    path: str | Path | None = None,
    overrides: Mapping[str, str] | Iterable[str] | None = None,
) -> RunConfig:
    """Defaults, then the file, then ``overrides`` (``key=value`` strings or a mapping)."""
    values = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(None, f"config file not found: {path}")
        values.update(parse_pairs(path.read_text(encoding="utf-8").splitlines(), str(path)))
    if overrides:
        items = overrides.items() if isinstance(overrides, Mapping) else (_split(o) for o in overrides)
        for key, text in items:
            values[key] = parse_value(key, str(text))
    return RunConfig(**values)


def _split(item: str) -> tuple[str, str]:
    if "=" not in item:
        raise ConfigError(None, f"override must be key=value, got {item!r}")
    key, value = item.split("=", 1)
    return key.strip(), value
