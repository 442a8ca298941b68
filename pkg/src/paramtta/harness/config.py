"""Experiment configuration: nested dataclasses with a YAML file format."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from ..stream import CORRUPTIONS, DEFAULT_SEQUENCE

ADAPTER_CHOICES = ("dual", "plain_lora", "off")
ALIGN_CHOICES = ("ot", "kl", "off")
OT_MODES = ("per_class", "joint")


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    d_in: int = 16
    width: int = 32
    n_hidden: int = 3
    num_classes: int = 4


@dataclass
class AdapterConfig:
    r1: int = 4
    r2: int = 4
    sites: list[int] = field(default_factory=lambda: [1, 2])
    kernel: str = "linear"
    rbf_sigma: float | None = None  # None: median heuristic


@dataclass
class LossConfig:
    lambda_orth: float = 0.5
    lambda_hsic: float = 0.5
    lambda_a: float = 1.0
    lambda_ca: float = 0.1


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 5e-4
    batch_size: int = 4


@dataclass
class OfflineConfig:
    n_train: int = 4000
    n_test: int = 1000
    source_scale: float = 4.0
    steps: int = 1500
    batch_size: int = 4
    lr: float = 3e-3
    ae_steps: int = 600
    ae_lr: float = 3e-3
    diff_steps: int = 800
    diff_lr: float = 2e-3
    diff_batch_size: int = 64


@dataclass
class GeneratorConfig:
    T: int = 100
    beta_start: float | None = None  # None: 1e-4 * 1000/T
    beta_end: float | None = None  # None: 0.02 * 1000/T
    z_dim: int = 16
    hidden: int = 64
    t0_frac: float = 0.3
    snapshot_every: int = 10
    warmup: int = 500
    blend: float = 1.0
    deterministic: bool = False


@dataclass
class AlignConfig:
    mode: str = "per_class"
    eps: float = 0.05
    tau_conf: float = 0.8
    max_iter: int = 200


@dataclass
class StreamConfig:
    sequence: list[str] = field(default_factory=lambda: list(DEFAULT_SEQUENCE))
    severity: float = 5
    batches_per_domain: int = 50
    gradual: bool = False


@dataclass
class AblationConfig:
    use_adapter: str = "dual"
    use_generator: bool = True
    align: str = "ot"


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    adapter: AdapterConfig = field(default_factory=AdapterConfig)
    losses: LossConfig = field(default_factory=LossConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    offline: OfflineConfig = field(default_factory=OfflineConfig)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    align: AlignConfig = field(default_factory=AlignConfig)
    stream: StreamConfig = field(default_factory=StreamConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        L = self.losses
        for name in ("lambda_orth", "lambda_hsic", "lambda_a", "lambda_ca"):
            if getattr(L, name) < 0:
                raise ConfigError(f"losses.{name} must be >= 0")
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr must be > 0")
        if self.optimizer.batch_size < 2:
            raise ConfigError("optimizer.batch_size must be >= 2 (HSIC needs two rows)")
        if self.ablation.use_adapter not in ADAPTER_CHOICES:
            raise ConfigError(f"ablation.use_adapter must be one of {ADAPTER_CHOICES}")
        if self.ablation.align not in ALIGN_CHOICES:
            raise ConfigError(f"ablation.align must be one of {ALIGN_CHOICES}")
        if self.align.mode not in OT_MODES:
            raise ConfigError(f"align.mode must be one of {OT_MODES}")
        if not 0.0 <= self.generator.blend <= 1.0:
            raise ConfigError("generator.blend must lie in [0, 1]")
        if not 0.0 <= self.generator.t0_frac <= 1.0:
            raise ConfigError("generator.t0_frac must lie in [0, 1]")
        for name in self.stream.sequence:
            if name not in CORRUPTIONS:
                raise ConfigError(f"unknown corruption {name!r} in stream.sequence")

    # -- conversions ----------------------------------------------------------
    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict | None) -> "ExperimentConfig":
        return _build(cls, data or {}, "")

    def replace(self, **sections: dict) -> "ExperimentConfig":
        """Copy with some fields overridden, e.g. ``cfg.replace(ablation={"align": "off"})``."""
        d = self.to_dict()
        for key, val in sections.items():
            if isinstance(val, dict):
                d[key].update(val)
            else:
                d[key] = val
        return ExperimentConfig.from_dict(d)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {prefix or '<root>'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys in {prefix or '<root>'}: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    for name, f in fields.items():
        if name not in data:
            continue
        val = data[name]
        sub = f.default_factory if f.default_factory is not dataclasses.MISSING else None
        if sub is not None and dataclasses.is_dataclass(sub):
            kwargs[name] = _build(sub, val, f"{prefix}{name}.")
        else:
            kwargs[name] = copy.deepcopy(val)
    return cls(**kwargs)
