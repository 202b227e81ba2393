"""Run configuration and its flat ``key = value`` text format.

Keys mirror the dataclass fields; nested sections use dotted names::

    output_dir = runs/desk
    precision = f64
    seed = 0
    model.token_dim = 64
    model.mask_schedule = 7, 5, 3, 1
    weights.w_bce = 1.0
    optimizer.learning_rate = 0.0001
    dataset.count = 8

Blank lines and ``#`` comments are ignored. Unknown keys are errors.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from ..losses import LossWeights
from ..model import ModelConfig
from ..ndtensor import ConfigurationError

PRECISIONS = ("f32", "f64")


@dataclass
class OptimizerConfig:
    learning_rate: float = 1e-4
    decayed_learning_rate: float = 1e-5
    decay_fraction: float = 0.5  # lr drops once step >= decay_fraction * total
    epochs: int = 5
    batch_size: int = 8
    steps: int = 0  # > 0 overrides epochs * batches_per_epoch

    def validate(self) -> None:
        if self.learning_rate <= 0 or self.decayed_learning_rate <= 0:
            raise ConfigurationError("learning rates must be positive")
        if not 0.0 < self.decay_fraction <= 1.0:
            raise ConfigurationError("optimizer.decay_fraction must be in (0, 1]")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("optimizer.epochs and optimizer.batch_size must be positive")
        if self.steps < 0:
            raise ConfigurationError("optimizer.steps must be >= 0")


@dataclass
class DatasetConfig:
    count: int = 64
    seed: int = 0
    occlusion: bool = False
    eval_count: int = 8
    eval_seed: int = 100000

    def validate(self) -> None:
        if self.count < 1 or self.eval_count < 1:
            raise ConfigurationError("dataset.count and dataset.eval_count must be positive")
        if self.seed < 0 or self.eval_seed < 0:
            raise ConfigurationError("dataset seeds must be non-negative")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    output_dir: str = "runs/default"
    precision: str = "f64"
    seed: int = 0  # parameter initialisation

    def validate(self) -> None:
        self.model.validate()
        self.optimizer.validate()
        self.dataset.validate()
        if self.precision not in PRECISIONS:
            raise ConfigurationError(f"precision must be one of {PRECISIONS}, got '{self.precision}'")

    def batches_per_epoch(self) -> int:
        return math.ceil(self.dataset.count / self.optimizer.batch_size)

    def total_steps(self) -> int:
        if self.optimizer.steps:
            return self.optimizer.steps
        return self.optimizer.epochs * self.batches_per_epoch()

    def learning_rate(self, step: int) -> float:
        """Step-decay schedule: base rate before the decay point, decayed after."""
        o = self.optimizer
        if step < o.decay_fraction * self.total_steps():
            return o.learning_rate
        return o.decayed_learning_rate


SECTIONS = ("model", "weights", "optimizer", "dataset")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, like, key: str):
    try:
        if isinstance(like, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(text)
        if isinstance(like, float):
            return float(text)
        if isinstance(like, tuple):
            return tuple(int(v) for v in text.replace(",", " ").split())
    except ValueError:
        raise ConfigurationError(f"bad value for {key}: '{text}'") from None
    return text


def config_to_text(config: RunConfig) -> str:
    lines = [f"{f.name} = {_format(getattr(config, f.name))}" for f in fields(config) if f.name not in SECTIONS]
    for section in SECTIONS:
        obj = getattr(config, section)
        lines += [f"{section}.{f.name} = {_format(getattr(obj, f.name))}" for f in fields(obj)]
    return "\n".join(lines) + "\n"


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Apply ``key = value`` lines on top of ``base`` (defaults when None)."""
    config = base or RunConfig()
    top: dict[str, object] = {}
    nested: dict[str, dict[str, object]] = {s: {} for s in SECTIONS}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {number}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        if section:
            if section not in nested:
                raise ConfigurationError(f"config line {number}: unknown section '{section}'")
            obj = getattr(config, section)
            if name not in {f.name for f in fields(obj)}:
                raise ConfigurationError(f"config line {number}: unknown key '{key}'")
            nested[section][name] = _parse(value, getattr(obj, name), key)
        else:
            if name in SECTIONS or name not in {f.name for f in fields(config)}:
                raise ConfigurationError(f"config line {number}: unknown key '{key}'")
            top[name] = _parse(value, getattr(config, name), key)
    updated = {s: replace(getattr(config, s), **nested[s]) for s in SECTIONS if nested[s]}
    config = replace(config, **top, **updated)
    config.validate()
    return config


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def desk_config(**overrides) -> RunConfig:
    """Defaults of the small-scale setup; keyword overrides use dotted names with ``__``.

    ``desk_config(dataset__count=8, optimizer__steps=500)``
    """
    config = RunConfig()
    lines = []
    for k, v in overrides.items():
        lines.append(f"{k.replace('__', '.')} = {_format(v)}")
    return parse_config("\n".join(lines), config)
