"""Run configuration: one YAML document with a section per subsystem.

Unknown keys fail fast. Environment variables with the ``CIR_`` prefix
override file values, e.g. ``CIR_TRAIN__EPOCHS=5`` sets train.epochs.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import yaml

from .artifacts import config_hash
from .errors import InvalidConfig
from .evaluation import EvalProtocol
from .pipeline import PairSamplingConfig
from .network import ModelConfig
from .training import TrainConfig
from .world import SyntheticWorldConfig

ENV_PREFIX = "CIR_"


@dataclass
class PathsConfig:
    collection: str = "collection.npz"
    dataset: str = "triplets.jsonl"
    eval_cases: str = "eval_cases.jsonl"
    checkpoint: str = "model.ckpt.npz"
    metrics: str = "train_log.jsonl"
    combiner_metrics: str = "combiner_log.jsonl"
    report: str = "eval_report.json"
    gallery: str = "gallery.html"
    sweep_csv: str = "scale_sweep.csv"
    sweep_plot: str = "scale_sweep.png"
    ablation_csv: str = "ablation.csv"

    def resolved(self, out_dir: str | Path) -> "PathsConfig":
        out = Path(out_dir)
        return PathsConfig(**{
            f.name: str(out / getattr(self, f.name))
            for f in dataclasses.fields(self)
        })


@dataclass
class EvalSetConfig:
    n_cases: int = 100
    seed: int = 0
    strategy: str = "same_meta_class"
    subset_size: int = 5


@dataclass
class BackendsConfig:
    caption: dict = field(default_factory=lambda: {"kind": "oracle"})
    reformulation: dict = field(default_factory=lambda: {"kind": "oracle"})


@dataclass
class SweepConfig:
    counts: list[int] = field(default_factory=lambda: [500, 1000, 2000, 4000])
    seed: int = 0

    def validate(self) -> None:
        if not self.counts:
            raise InvalidConfig("sweep requires at least one triplet count")
        if any(b <= a for a, b in zip(self.counts, self.counts[1:])):
            raise InvalidConfig("sweep counts must be strictly increasing")


@dataclass
class RunConfig:
    paths: PathsConfig = field(default_factory=PathsConfig)
    world: SyntheticWorldConfig = field(default_factory=SyntheticWorldConfig)
    sampling: PairSamplingConfig = field(default_factory=PairSamplingConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_protocol: EvalProtocol = field(default_factory=EvalProtocol)
    eval_set: EvalSetConfig = field(default_factory=EvalSetConfig)
    backends: BackendsConfig = field(default_factory=BackendsConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    word_cap: int = 12
    train_preset: Optional[str] = None  # "paper" applies the reported optimizer values

    def validate(self) -> None:
        self.world.validate()
        self.sampling.validate()
        self.model.validate()
        self.train.validate()
        self.eval_protocol.validate()
        self.sweep.validate()
        if self.train_preset not in (None, "paper"):
            raise InvalidConfig(f"unknown train preset {self.train_preset!r}")
        if self.word_cap < 1:
            raise InvalidConfig("word_cap must be >= 1")

    def effective_train(self) -> TrainConfig:
        return self.train.paper_preset() if self.train_preset == "paper" else self.train

    def to_dict(self) -> dict:
        return {
            "paths": dataclasses.asdict(self.paths),
            "world": self.world.to_dict(),
            "sampling": dataclasses.asdict(self.sampling),
            "model": self.model.to_dict(),
            "train": dataclasses.asdict(self.train),
            "eval_protocol": dataclasses.asdict(self.eval_protocol),
            "eval_set": dataclasses.asdict(self.eval_set),
            "backends": dataclasses.asdict(self.backends),
            "sweep": dataclasses.asdict(self.sweep),
            "word_cap": self.word_cap,
            "train_preset": self.train_preset,
        }

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def apply_seed(self, seed: int) -> None:
        """Common --seed flag: pin every per-section seed at once."""
        self.world.seed = seed
        self.sampling.seed = seed
        self.model.seed = seed
        self.train.seed = seed
        self.eval_set.seed = seed

    def resolve_paths(self, out_dir: str | Path) -> None:
        self.paths = self.paths.resolved(out_dir)


_SECTION_TYPES: dict[str, type] = {
    "paths": PathsConfig,
    "world": SyntheticWorldConfig,
    "sampling": PairSamplingConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "eval_protocol": EvalProtocol,
    "eval_set": EvalSetConfig,
    "backends": BackendsConfig,
    "sweep": SweepConfig,
}
_SCALAR_KEYS = {"word_cap", "train_preset"}


def _check_keys(section: str, data: dict, cls: type) -> None:
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise InvalidConfig(
            f"unknown key(s) in section {section!r}: {', '.join(sorted(unknown))}"
        )


def _build_section(section: str, data: Any) -> Any:
    cls = _SECTION_TYPES[section]
    if not isinstance(data, dict):
        raise InvalidConfig(f"section {section!r} must be a mapping")
    _check_keys(section, data, cls)
    if cls is SyntheticWorldConfig:
        return SyntheticWorldConfig.from_dict({**SyntheticWorldConfig().to_dict(), **data})
    return cls(**data)


def _apply_env_overrides(raw: dict) -> dict:
    for key, value in os.environ.items():
        if not key.startswith(ENV_PREFIX):
            continue
        spec = key[len(ENV_PREFIX):].lower()
        if "__" in spec:
            section, field_name = spec.split("__", 1)
            raw.setdefault(section, {})
            if not isinstance(raw[section], dict):
                raise InvalidConfig(f"cannot override non-mapping section {section!r}")
            raw[section][field_name] = yaml.safe_load(value)
        elif spec in _SCALAR_KEYS:
            raw[spec] = yaml.safe_load(value)
    return raw


def load_config(path: Optional[str | Path] = None, use_env: bool = True) -> RunConfig:
    """Load and validate a RunConfig; missing sections take defaults."""
    raw: dict = {}
    if path is not None:
        with open(path, "r", encoding="utf-8") as f:
            loaded = yaml.safe_load(f)
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise InvalidConfig("config file must contain a mapping")
        raw = loaded
    if use_env:
        raw = _apply_env_overrides(raw)

    unknown = set(raw) - set(_SECTION_TYPES) - _SCALAR_KEYS
    if unknown:
        raise InvalidConfig(f"unknown config section(s): {', '.join(sorted(unknown))}")

    kwargs: dict[str, Any] = {}
    for section in _SECTION_TYPES:
        if section in raw:
            try:
                kwargs[section] = _build_section(section, raw[section])
            except TypeError as exc:
                raise InvalidConfig(f"bad section {section!r}: {exc}") from exc
    for key in _SCALAR_KEYS:
        if key in raw:
            kwargs[key] = raw[key]
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg
