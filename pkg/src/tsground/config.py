"""Run configuration shared by training, evaluation and the CLI."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path

from .errors import ConfigError

MODES = ("vq", "v_only", "q_only")
MD_CHOICES = ("off", "full", "v_only", "q_only")


@dataclass
class RunConfig:
    # what to train
    mode: str = "vq"
    dd: bool = False
    md: str = "off"
    n_clip: int = 5
    max_new_per_sample: int | None = None
    # model dimensions (desk-scale defaults; hidden 128 / 8 heads are the
    # full-scale settings and remain available through these knobs)
    d: int = 16
    heads: int = 2
    d_q: int = 12
    encoder_blocks: int = 1
    predictor_blocks: int = 2
    kernel: int = 7
    dropout: float = 0.1
    n_v_max: int = 128
    n_q_max: int = 32
    vocab_size: int | None = None
    # optimization
    lr: float = 0.0005
    batch_size: int = 16
    epochs: int = 100
    patience: int = 10
    grad_clip: float = 1.0
    loss_weight_v: float = 1.0  # non-1.0 values depart from the plain joint loss
    loss_weight_q: float = 1.0
    seed: int = 0
    # paths (CLI only)
    data_dir: str = ""
    out_dir: str = ""

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.md not in MD_CHOICES:
            raise ConfigError(f"md must be one of {MD_CHOICES}, got {self.md!r}")
        if self.md != "off" and self.mode != "vq":
            raise ConfigError("md != 'off' requires mode == 'vq'")
        if self.dd and self.mode not in MODES:
            raise ConfigError("dd requires a trainable mode")
        if self.n_clip < 1:
            raise ConfigError(f"n_clip must be >= 1, got {self.n_clip}")
        if self.max_new_per_sample is not None and self.max_new_per_sample < 0:
            raise ConfigError("max_new_per_sample must be >= 0 or None")
        if self.d < 1 or self.heads < 1 or self.d % self.heads != 0:
            raise ConfigError(f"d ({self.d}) must be a positive multiple of heads ({self.heads})")
        if self.kernel % 2 != 1:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if not (0.0 <= self.dropout < 1.0):
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")

    def to_dict(self) -> dict:
        return asdict(self)


def config_from_dict(d: dict) -> RunConfig:
    known = {f.name for f in fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**d)
    cfg.validate()
    return cfg


def load_config(path: Path | str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


_BOOL_WORDS = {"true": True, "false": False, "1": True, "0": False}


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    """Apply 'key=value' strings, coercing to the field's annotated type."""
    type_by_name = {f.name: f.type for f in fields(RunConfig)}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        if key not in type_by_name:
            raise ConfigError(f"unknown config key {key!r}")
        ftype = type_by_name[key]
        value: object
        if raw.lower() in ("none", "null"):
            value = None
        elif ftype == "bool":
            if raw.lower() not in _BOOL_WORDS:
                raise ConfigError(f"cannot parse {raw!r} as bool for {key}")
            value = _BOOL_WORDS[raw.lower()]
        elif ftype in ("int", "int | None"):
            value = int(raw)
        elif ftype == "float":
            value = float(raw)
        else:
            value = raw
        setattr(cfg, key, value)
    cfg.validate()
    return cfg
