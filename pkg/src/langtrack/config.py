"""Run configuration: dataclasses plus the flat ``section.key = value`` format.

The file grammar is deliberately tiny: one assignment per line, ``#``
comments, blank lines.  Unknown keys are errors, never silently absorbed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError


@dataclass
class ModelConfig:
    """Architecture, token-aggregation, and loss-weight settings."""

    embed_dim: int = 64
    num_heads: int = 4
    num_layers: int = 4
    patch_size: int = 8
    template_size: int = 64
    search_size: int = 128
    max_language_tokens: int = 8
    search_prompt_count: int = 8
    denoise_ratio: float = 0.2
    denoise_metric: str = "euclidean"
    denoise_scope: str = "batch"
    lam1: float = 5.0
    lam2: float = 2.0
    template_context: float = 2.0
    seed: int = 0
    dtype: str = "float32"
    dta_enabled: bool = True
    dta_layers: str = "all"
    merge_mode: str = "pooled"

    def validate(self):
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )
        for name in ("template_size", "search_size"):
            if getattr(self, name) % self.patch_size != 0:
                raise ConfigError(f"{name} not divisible by patch_size {self.patch_size}")
        if self.search_prompt_count < 1:
            raise ConfigError("search_prompt_count must be >= 1")
        if not 0.0 <= self.denoise_ratio < 1.0:
            raise ConfigError(f"denoise_ratio {self.denoise_ratio} outside [0, 1)")
        for name, allowed in (
            ("denoise_metric", ("euclidean", "cross-entropy")),
            ("denoise_scope", ("batch", "sample")),
            ("dtype", ("float32", "float64")),
            ("dta_layers", ("all", "last")),
            ("merge_mode", ("pooled", "paired")),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if self.max_language_tokens < 1:
            raise ConfigError("max_language_tokens must be >= 1")
        if not 1.0 <= self.template_context <= 4.0:
            raise ConfigError(f"template_context {self.template_context} outside [1, 4]")
        return self

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    @property
    def n_template_tokens(self):
        side = self.template_size // self.patch_size
        return side * side

    @property
    def n_search_tokens(self):
        return self.grid * self.grid

    @property
    def grid(self):
        return self.search_size // self.patch_size


@dataclass
class AugmentSpec:
    """Weak geometry (shared across views) and strong photometrics."""

    center_jitter: float = 0.08
    scale_jitter: float = 0.08
    brightness: float = 0.2
    contrast: float = 0.2
    channel_mix: float = 0.1
    grayscale_prob: float = 0.05

    def validate(self):
        for name in ("center_jitter", "scale_jitter"):
            v = getattr(self, name)
            if not 0.0 <= v <= 0.5:
                raise ConfigError(f"{name} {v} outside [0, 0.5]")
        for name in ("brightness", "contrast", "channel_mix", "grayscale_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} {v} outside [0, 1]")
        return self


@dataclass
class TrainConfig:
    """Schedule, optimizer, pseudo-label provider, and data paths."""

    epochs: int = 30
    samples_per_epoch: int = 200
    clip_len: int = 4
    lr_backbone: float = 1e-3
    lr_head: float = 1e-3
    weight_decay: float = 1e-4
    lr_drop_fraction: float = 0.8
    seed: int = 0
    check_finite: bool = False
    provider: str = "oracle"
    sigma_center: float = 0.05
    sigma_scale: float = 0.1
    p_gross: float = 0.05
    labels: str = ""
    corpus: str = ""
    out_dir: str = "runs/default"

    def validate(self):
        if self.epochs < 1 or self.samples_per_epoch < 1:
            raise ConfigError("epochs and samples_per_epoch must be >= 1")
        if self.clip_len < 1:
            raise ConfigError("clip_len must be >= 1")
        if self.provider not in ("oracle", "file"):
            raise ConfigError(f"provider must be oracle|file, got {self.provider!r}")
        if not 0.0 <= self.p_gross <= 1.0:
            raise ConfigError(f"p_gross {self.p_gross} outside [0, 1]")
        if not 0.0 < self.lr_drop_fraction <= 1.0:
            raise ConfigError("lr_drop_fraction must lie in (0, 1]")
        for name in ("corpus", "labels"):
            path = getattr(self, name)
            if path and not os.path.exists(path):
                raise ConfigError(f"train.{name} path does not exist: {path}")
        return self


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    train: TrainConfig = field(default_factory=TrainConfig)

    def validate(self):
        self.model.validate()
        self.augment.validate()
        self.train.validate()
        return self


_SECTIONS = ("model", "augment", "train")


def _coerce(raw, kind, key):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"cannot parse value {raw!r} for key {key}") from None


def parse_config_text(text, base=None):
    """Apply ``section.key = value`` lines on top of ``base`` (or defaults)."""
    cfg = base if base is not None else RunConfig()
    cfg = RunConfig(replace(cfg.model), replace(cfg.augment), replace(cfg.train))
    known = {
        f"{section}.{f.name}": (section, f.name, f.type)
        for section in _SECTIONS
        for f in fields(getattr(cfg, section))
    }
    types = {"int": int, "float": float, "str": str, "bool": bool}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {stripped!r}")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        section, name, ftype = known[key]
        kind = types.get(ftype, str) if isinstance(ftype, str) else ftype
        setattr(getattr(cfg, section), name, _coerce(raw, kind, key))
    return cfg


def load_config(path, base=None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, base=base)


def config_to_text(cfg, sections=_SECTIONS):
    """Deterministic serialization (registry order) for files and checkpoints."""
    lines = []
    for section in sections:
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {getattr(obj, f.name)}")
    return "\n".join(lines) + "\n"


def model_config_text(model_cfg):
    return config_to_text(RunConfig(model=model_cfg), sections=("model",))


def parse_model_config_text(text):
    return parse_config_text(text).model
