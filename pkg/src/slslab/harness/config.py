"""Training configuration and its key-value file format.

Grammar, one setting per line::

    # comment
    key = value            # trailing comments allowed
    seeds = 0, 1, 2        # tuple fields take comma-separated values

Keys are ``TrainConfig`` field names (``-`` and ``_`` are interchangeable).
Booleans accept true/false/yes/no/1/0.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass
from pathlib import Path

from ..losses import LOCATION_KINDS, LOSS_KINDS, VARIANCE_KINDS
from ..mshnet import UNetConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = ""
    out_dir: str = "runs"
    loss: str = "sls"
    location: str = "polar"
    variance: str = "population"
    supervised_scales: int = 4
    epochs: int = 20
    batch_size: int = 4
    lr: float = 0.05
    eps: float = 1e-10
    initial_accumulator: float = 0.0
    warmup_epochs: int = 0
    seeds: tuple[int, ...] = (0,)
    threshold: float = 0.5
    match_dist: float = 3.0
    base_channels: int = 4
    channel_multipliers: tuple[int, ...] = (8, 4, 2, 1)
    instance_norm: bool = True
    head_kernel: int = 1
    head_bias: float = -4.0

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        object.__setattr__(self, "channel_multipliers", tuple(int(m) for m in self.channel_multipliers))
        self.validate()

    def validate(self) -> None:
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}, got {self.loss!r}")
        if self.location not in LOCATION_KINDS:
            raise ConfigError(f"location must be one of {LOCATION_KINDS}, got {self.location!r}")
        if self.location != "polar" and self.loss != "sls":
            raise ConfigError("a location variant only applies to loss=sls")
        if self.variance not in VARIANCE_KINDS:
            raise ConfigError(f"variance must be one of {VARIANCE_KINDS}")
        if not 0 <= self.supervised_scales <= 4:
            raise ConfigError("supervised_scales must be in 0..4")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0 or self.warmup_epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0 or self.eps < 0 or self.initial_accumulator < 0:
            raise ConfigError("lr must be positive; eps and initial_accumulator non-negative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not 0 < self.threshold < 1:
            raise ConfigError("threshold must be in (0, 1)")

    def model_config(self, input_size: tuple[int, int], seed: int) -> UNetConfig:
        return UNetConfig(
            input_size=input_size,
            base_channels=self.base_channels,
            channel_multipliers=self.channel_multipliers,
            seed=seed,
            instance_norm=self.instance_norm,
            head_kernel=self.head_kernel,
            head_bias=self.head_bias,
        )

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def snapshot(self) -> dict:
        d = dataclasses.asdict(self)
        d["seeds"] = list(self.seeds)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d

    def training_snapshot(self) -> dict:
        """Fields that influence a run's result (paths and seed lists excluded)."""
        d = self.snapshot()
        for key in ("dataset", "out_dir", "seeds"):
            d.pop(key)
        return d


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_HINTS = typing.get_type_hints(TrainConfig)


def _convert(name: str, raw) -> object:
    hint = _HINTS[name]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if hint is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if hint is int:
            return int(raw)
        if hint is float:
            return float(raw)
        if typing.get_origin(hint) is tuple:
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from exc
    return raw


def normalize_key(key: str) -> str:
    name = key.strip().replace("-", "_")
    if name not in _FIELDS:
        raise ConfigError(f"unknown config key {key!r}")
    return name


def parse_config_text(text: str) -> dict:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        name = normalize_key(key)
        values[name] = _convert(name, value)
    return values


def apply_overrides(config: TrainConfig, overrides: dict) -> TrainConfig:
    changes = {}
    for key, value in overrides.items():
        name = normalize_key(key)
        changes[name] = _convert(name, value)
    try:
        return config.replace(**changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path=None, overrides: dict | None = None) -> TrainConfig:
    values = parse_config_text(Path(path).read_text()) if path else {}
    config = TrainConfig(**values)
    return apply_overrides(config, overrides or {})


def dump_config(config: TrainConfig) -> str:
    lines = []
    for key, value in config.snapshot().items():
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def config_digest(config: TrainConfig) -> str:
    return hashlib.sha256(json.dumps(config.training_snapshot(), sort_keys=True).encode()).hexdigest()[:16]
