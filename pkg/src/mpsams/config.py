"""Experiment configuration: nested JSON sections mapped onto the library dataclasses.

Precedence is ``--set`` overrides, then the JSON file, then dataclass
defaults. Unknown keys are rejected by name.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .data import SyntheticConfig
from .model import NetConfig
from .pipeline import RunConfig, SplitSpec, TrainConfig
from .schedule import ScheduleParams


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusConfig:
    manifest: str | None = None  # load this instead of generating
    count: int = 360


@dataclass(frozen=True)
class RunSection:
    method: str = "kmeans"
    patch_size: int = 4
    base_ratio: float = 0.75
    checkpoint_every: int = 0  # 0: final checkpoint only
    seeds: int = 1  # training seeds are --seed, --seed + 1, ...
    arms: tuple[str, ...] = ("base", "base+AMS", "base+MPS", "base+AMS+MPS")
    selection: str = "mps"  # pretrain command only


@dataclass(frozen=True)
class BenchSection:
    patch_counts: tuple[int, ...] = (64, 256, 1024, 4096)
    methods: tuple[str, ...] = ("kmeans", "hierarchical")
    trials: int = 3
    dim: int = 64
    budget_seconds: float = 60.0


@dataclass(frozen=True)
class EntropySection:
    models: int = 1000
    size: int = 8
    concentration: float = 1.0
    strategy: str = "argmax"


@dataclass(frozen=True)
class SweepSection:
    epochs: tuple[int, ...] = (1, 10, 50, 100)
    arm: str = "base+AMS+MPS"


SECTIONS: dict[str, type] = {
    "data": SyntheticConfig,
    "corpus": CorpusConfig,
    "split": SplitSpec,
    "net": NetConfig,
    "schedule": ScheduleParams,
    "pretrain": TrainConfig,
    "finetune": TrainConfig,
    "run": RunSection,
    "bench": BenchSection,
    "entropy": EntropySection,
    "sweep": SweepSection,
}

# section defaults that differ from the dataclass defaults
_DEFAULTS: dict[str, dict[str, Any]] = {
    "split": {"train": 300 / 360, "val": 30 / 360, "test": 30 / 360, "labeled_fraction": 0.05},
    "net": {"base_channels": 8},
    "pretrain": {"plan_cache": True},
    "finetune": {"epochs": 30, "batch_size": 4, "lr_schedule": "warmup-cosine"},
}

# seed fields are derived from --seed, never set directly
_SEED_FIELDS = {("split", "seed"), ("net", "seed"), ("pretrain", "seed"), ("finetune", "seed")}


def _coerce(value: Any, current: Any) -> Any:
    if isinstance(current, tuple) and isinstance(value, list):
        return tuple(value)
    return value


def _build(name: str, cls: type, values: dict[str, Any]):
    known = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        if (name, key) in _SEED_FIELDS:
            raise ConfigError(f"config key {name}.{key} is derived from --seed")
    base = cls(**_DEFAULTS.get(name, {}))
    try:
        return replace(base, **{k: _coerce(v, getattr(base, k)) for k, v in values.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {name} config: {exc}") from exc


def parse_override(text: str) -> tuple[list[str], Any]:
    """``a.b=value``; the value is parsed as JSON when possible, else kept as a string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


@dataclass(frozen=True)
class ExperimentConfig:
    sections: dict[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __getattr__(self, name):
        try:
            return self.__dict__["sections"][name]
        except KeyError:
            raise AttributeError(name) from None

    @classmethod
    def resolve(cls, file_values: dict | None = None, overrides: list[str] = (), seed: int = 0) -> "ExperimentConfig":
        raw: dict[str, dict] = {k: {} for k in SECTIONS}
        for name, body in (file_values or {}).items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config key {name}")
            if not isinstance(body, dict):
                raise ConfigError(f"config section {name} must be an object")
            raw[name].update(body)
        for text in overrides:
            path, value = parse_override(text)
            if len(path) != 2 or path[0] not in SECTIONS:
                raise ConfigError(f"unknown config key {'.'.join(path)}")
            raw[path[0]][path[1]] = value
        built = {name: _build(name, cls_, raw[name]) for name, cls_ in SECTIONS.items()}
        built["split"] = replace(built["split"], seed=seed)
        built["net"] = replace(built["net"], seed=seed)
        return cls(built, seed)

    @classmethod
    def load(cls, path: str | Path | None, overrides: list[str] = (), seed: int = 0) -> "ExperimentConfig":
        values = None
        if path is not None:
            try:
                values = json.loads(Path(path).read_text())
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
            if not isinstance(values, dict):
                raise ConfigError(f"{path}: top level must be an object")
        return cls.resolve(values, overrides, seed)

    def snapshot(self) -> dict:
        out = {name: asdict(v) for name, v in self.sections.items()}
        out["seed"] = self.seed
        return out

    def to_json(self) -> str:
        return json.dumps(self.snapshot(), indent=2, sort_keys=True) + "\n"

    def config_hash(self) -> str:
        blob = json.dumps(self.snapshot(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def run_config(self) -> RunConfig:
        r = self.run
        return RunConfig(
            net=self.net,
            schedule=self.schedule,
            pretrain=self.pretrain,
            finetune=self.finetune,
            patch_size=r.patch_size,
            method=r.method,
            base_ratio=r.base_ratio,
        )

    def training_seeds(self) -> list[int]:
        return [self.seed + i for i in range(self.run.seeds)]
