"""Run configuration: every knob of the training loop in one flat record."""

from __future__ import annotations

import hashlib
import json
import math
import typing
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import ModelConfig
from .ssl import MODES


@dataclass
class RunConfig:
    ssl: str = "te"
    seed: int = 0
    # model
    n_layers: int = 2
    d_model: int = 300
    d_ff: int = 512
    n_heads: int = 5
    max_len: int = 256
    dropout_f: float | None = None   # 0.5 for pi, 0.3 for te, 0.1 for none
    dropout_u: float = 0.1
    # partition
    split_level: int = 1
    unfreeze_threshold: float = 0.8
    # data / loop
    epochs: int | None = None        # 3 supervised, 8 with unlabeled data
    batch_size: int = 16
    labeled_frac: float = 0.25
    accumulation_steps: int | None = None  # 1 supervised, 4 otherwise
    # optimizer
    peak_lr: float = 1e-3
    lr_warmup_frac: float = 0.1
    clip: float = 0.4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    # consistency
    w_max: float = 10.0
    warmup_frac: float = 0.25
    rampdown_frac: float = 0.15
    rampup_coef: float = 5.0
    rampdown_coef: float = 12.5
    alpha: float = 0.6
    consistency_on_labeled: bool = False

    def resolved(self) -> "RunConfig":
        """Fill mode-dependent defaults that were left unset, then validate."""
        sup = self.ssl == "none"
        cfg = replace(
            self,
            epochs=self.epochs if self.epochs is not None else (3 if sup else 8),
            accumulation_steps=self.accumulation_steps if self.accumulation_steps is not None
            else (1 if sup else 4),
            dropout_f=self.dropout_f if self.dropout_f is not None
            else {"pi": 0.5, "te": 0.3, "none": 0.1}.get(self.ssl, 0.1),
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.ssl not in MODES:
            raise ConfigError(f"ssl must be one of {MODES}, got {self.ssl!r}")
        for name in ("unfreeze_threshold", "lr_warmup_frac", "warmup_frac", "rampdown_frac", "alpha"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if not 0.0 < self.labeled_frac <= 1.0:
            raise ConfigError("labeled_frac must be in (0, 1]")
        if self.warmup_frac + self.rampdown_frac >= 1.0:
            raise ConfigError("warmup_frac + rampdown_frac must be < 1")
        for name in ("epochs", "batch_size", "accumulation_steps"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.clip <= 0 or self.peak_lr <= 0:
            raise ConfigError("clip and peak_lr must be positive")
        if not 0 <= self.split_level <= self.n_layers:
            raise ConfigError(f"split_level must be in [0, {self.n_layers}]")
        self.model_config(vocab_size=10, n_classes=2).validate()

    def model_config(self, vocab_size: int, n_classes: int) -> ModelConfig:
        return ModelConfig(self.n_layers, self.d_model, self.d_ff, self.n_heads, vocab_size,
                           self.max_len, n_classes,
                           0.1 if self.dropout_f is None else self.dropout_f, self.dropout_u)

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, overrides: dict) -> "RunConfig":
        known = {f.name: f for f in fields(self)}
        typed = {}
        for key, raw in overrides.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            typed[key] = coerce(key, raw)
        return replace(self, **typed)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls().with_overrides(parse_kv(text, path))


def parse_kv(text: str, source="<config>") -> dict:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


_HINTS = typing.get_type_hints(RunConfig)


def coerce(key: str, raw):
    if not isinstance(raw, str):
        return raw
    hint = _HINTS[key]
    args = typing.get_args(hint)
    base = next((a for a in args if a is not type(None)), hint) if args else hint
    if raw.lower() in ("none", "") and type(None) in args:
        return None
    try:
        if base is bool:
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        val = base(raw)
        if base is float and not math.isfinite(val):
            raise ValueError(raw)
        return val
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def write_kv(cfg: RunConfig, path) -> None:
    lines = [f"{k} = {v}\n" for k, v in cfg.to_dict().items()]
    Path(path).write_text("".join(lines), encoding="utf-8")
