"""Run configuration: a plain ``key = value`` text file.

Blank lines and ``#`` comments are ignored.  List values are
comma-separated.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError

METHODS = ("profile", "sibs", "mgs", "all")


@dataclass
class RunConfig:
    # model and data
    d: int = 64
    f: int = 256
    layers: int = 6
    n_train: int = 8000
    n_heldout: int = 1000
    n_profile: int = 1000
    data_seed: int = 0
    # base training
    epochs: int = 10
    lr: float = 0.05
    batch_size: int = 32
    bias_shift: float = 1.6
    seed: int = 0
    # methods
    method: str = "all"
    mask_levels: list[float] = field(default_factory=lambda: [0.5, 0.7, 0.9])
    mask_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    # Values below 1 are fractions of f.
    budgets: list[float] = field(default_factory=lambda: [0.01, 0.125, 0.25])
    gate_ratio: float = 0.125
    gate_epochs: int = 5
    gate_lr: float = 0.1
    thresholds: list[float] = field(default_factory=lambda: [0.5])
    quality_budget: float = 0.01
    threads: int = 1
    out_dir: str = "run"

    def validate(self) -> "RunConfig":
        for name in ("d", "f", "layers", "n_train", "n_heldout", "n_profile", "epochs",
                     "batch_size", "gate_epochs", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.n_profile > self.n_train:
            raise ConfigError("n_profile cannot exceed n_train")
        if self.lr <= 0 or self.gate_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.bias_shift < 0 or self.quality_budget < 0:
            raise ConfigError("bias_shift and quality_budget must be nonnegative")
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ConfigError("budgets must be positive")
        if len(self.thresholds) not in (1, self.layers):
            raise ConfigError("thresholds needs one value or one per layer")
        return self

    def budget_counts(self) -> list[int]:
        counts = []
        for b in self.budgets:
            k = max(1, round(b * self.f)) if b < 1 else int(b)
            if k > self.f:
                raise ConfigError(f"budget {b} exceeds f={self.f}")
            if k not in counts:
                counts.append(k)
        return counts

    def to_text(self) -> str:
        lines = []
        for fld in dataclasses.fields(self):
            v = getattr(self, fld.name)
            lines.append(f"{fld.name} = {','.join(str(x) for x in v) if isinstance(v, list) else v}")
        return "\n".join(lines) + "\n"


def _coerce(name: str, raw: str, template):
    try:
        if isinstance(template, list):
            elem = type(template[0]) if template else float
            return [elem(p.strip()) for p in raw.split(",") if p.strip()]
        if isinstance(template, bool):
            return raw.lower() in ("1", "true", "yes")
        return type(template)(raw)
    except ValueError as exc:
        raise ConfigError(f"bad value for {name!r}: {raw!r}") from exc


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    cfg = base or RunConfig()
    known = {f.name for f in dataclasses.fields(cfg)}
    updates = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        updates[key] = _coerce(key, raw, getattr(cfg, key))
    return dataclasses.replace(cfg, **updates)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    return parse_config(path.read_text())
