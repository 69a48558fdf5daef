"""Experiment configuration: nested dataclasses serialised as JSON."""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .adaptlearn import LearnConfig
from .autoscaler import TrustConfig
from .simcluster.simulator import SimConfig


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}")
        self.path = path


# offline training budget used by the pipeline: a few minutes per preset on one core
DESK_LEARN = dict(em_iterations=2, inner_epochs=40, generator_epochs=1, lr=3e-3)


@dataclass
class WorkloadConfig:
    pattern: str = "composite"
    duration: int = 150
    seed: int = 0
    base_rps: float | None = None  # None: the preset's calibrated level
    request_mix: list[float] | None = None


@dataclass
class DatasetConfig:
    runs: int = 4
    duration: int = 200
    pattern: str = "composite"
    seed: int = 100
    request_mix: list[float] | None = None
    label_rho: float = 0.6  # utilisation the replica labels are sized for


@dataclass
class EstimatorSettings:
    tau: int = 12
    blocks: int = 2
    cheb_order: int = 3
    hidden: int = 16
    seed: int = 0


@dataclass
class PolicyConfig:
    kind: str = "aws_rule"
    holistic: bool = False
    target_util: float = 0.5
    cooldown: int = 3
    rounding: str = "ceil"
    retrain_interval: int = 120
    label_rho: float = 0.6
    trust: TrustConfig = field(default_factory=TrustConfig)


@dataclass
class ExperimentConfig:
    preset: str = "boutique11"
    spec_path: str | None = None
    sim: SimConfig = field(default_factory=SimConfig)
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    estimator: EstimatorSettings = field(default_factory=EstimatorSettings)
    learn: LearnConfig = field(default_factory=lambda: LearnConfig(**DESK_LEARN))
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"

    def to_dict(self) -> dict:
        return asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        return _build(cls, d, "config")

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            data = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(str(path), "file not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(str(path), f"invalid JSON: {exc}") from None
        return cls.from_dict(data)


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        if dataclasses.is_dataclass(hint):
            kwargs[key] = _build(hint, value, f"{path}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None
