"""Run configuration: one structured-text file (YAML or JSON) covering the
simulator, attacks, dataset, model, loss, forest and experiment choices."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

import yaml

from .attacks import DEFAULT_CAP, DEFAULT_RAMP, TAU_MAX, TAU_MIN
from .dataset import ALL_AREAS, ImbalanceSpec, LabelBudget
from .evaluation import EXPERIMENTS, PipelineConfig
from .forest import ForestConfig
from .grid import AreaParams, GridConfig, config_hash
from .model import LOSS_KINDS, POOLING_MODES, LossSpec, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class AttackConfig:
    duration: int = 100
    cap: float = DEFAULT_CAP
    ramp: float = DEFAULT_RAMP
    target: tuple = (1, 3)
    target_area: int = 1
    tau_range: tuple = (TAU_MIN, TAU_MAX)

    def options(self) -> dict:
        return {"duration": self.duration, "cap": self.cap, "ramp": self.ramp, "target": tuple(self.target),
                "target_area": self.target_area, "tau_range": tuple(self.tau_range)}


@dataclass
class SimulateConfig:
    normal: int = 30
    fdia: int = 30
    tda: int = 30

    def counts(self) -> dict[str, int]:
        return {"none": self.normal, "fdia": self.fdia, "tda": self.tda}


@dataclass
class DatasetConfig:
    w1: float = 80
    stride: int = 5
    areas: tuple = ALL_AREAS
    fractions: tuple = (0.43, 0.07, 0.50)
    imbalance: ImbalanceSpec = field(default_factory=ImbalanceSpec)
    label: LabelBudget = field(default_factory=LabelBudget)


@dataclass
class ModelSection:
    dim: int = 32
    heads: int = 4
    ff_hidden: int = 64
    encoder_blocks: int = 3
    decoder_blocks: int = 2
    pooling: str = "mean"


@dataclass
class ExperimentConfig:
    name: str = "loss"
    embed_count: int = 3000
    inference_samples: int = 1000
    plot: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    seeds: list | None = None
    out: str = "runs/default"
    workers: int | None = None
    grid: GridConfig = field(default_factory=GridConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    simulate: SimulateConfig = field(default_factory=SimulateConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelSection = field(default_factory=ModelSection)
    loss: LossSpec = field(default_factory=LossSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    forest: ForestConfig = field(default_factory=ForestConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    @property
    def eval_seeds(self) -> list[int]:
        return list(self.seeds) if self.seeds else [self.seed, self.seed + 1, self.seed + 2]

    @property
    def worker_count(self) -> int:
        return self.workers or os.cpu_count() or 1

    def pipeline(self) -> PipelineConfig:
        d, m = self.dataset, self.model
        return PipelineConfig(
            w1=d.w1, stride=d.stride, areas=tuple(d.areas), fractions=tuple(d.fractions),
            imbalance=d.imbalance, label=d.label,
            dim=m.dim, heads=m.heads, ff_hidden=m.ff_hidden,
            encoder_blocks=m.encoder_blocks, decoder_blocks=m.decoder_blocks,
            loss=self.loss, train=self.train,
            forest=ForestConfig(**{**asdict(self.forest), "workers": self.worker_count}),
            pooling=m.pooling,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = self.grid.to_dict()
        return _plain(d)

    # Stage hashes: each artifact records the hash of everything that can
    # change it; output location and worker count never do.
    def stage_hash(self, stage: str) -> str:
        d = self.to_dict()
        parts = {"simulate": ["seed", "grid", "attack", "simulate"]}
        parts["dataset"] = parts["simulate"] + ["dataset"]
        parts["model"] = parts["dataset"] + ["model", "loss", "train"]
        parts["evaluate"] = parts["model"] + ["seeds", "forest", "experiment"]
        if stage not in parts:
            raise KeyError(stage)
        return config_hash({k: d[k] for k in parts[stage]})

    def hash(self) -> str:
        return self.stage_hash("evaluate")


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, data, path: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"{path or 'config'}: unknown key(s) {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in data.items():
        current = getattr(defaults, name)
        sub = f"{path}.{name}" if path else name
        if is_dataclass(current) and not isinstance(current, type):
            kwargs[name] = _build(type(current), value, sub)
        elif cls is GridConfig and name == "areas":
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list of area parameter mappings")
            kwargs[name] = [_build(AreaParams, v, f"{sub}[{i}]") for i, v in enumerate(value)]
        elif isinstance(current, tuple) and isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from exc


def validate(cfg: RunConfig) -> RunConfig:
    d = cfg.dataset
    if cfg.experiment.name not in EXPERIMENTS:
        raise ConfigError(f"experiment.name: unknown {cfg.experiment.name!r}; valid: {', '.join(EXPERIMENTS)}")
    if cfg.loss.kind not in LOSS_KINDS:
        raise ConfigError(f"loss.kind must be one of {LOSS_KINDS}")
    if cfg.model.pooling not in POOLING_MODES:
        raise ConfigError(f"model.pooling must be one of {POOLING_MODES}")
    if d.w1 <= 0 or d.w1 % cfg.grid.slot_seconds:
        raise ConfigError(f"dataset.w1={d.w1} is not a positive multiple of {cfg.grid.slot_seconds} s")
    if d.stride < 1:
        raise ConfigError("dataset.stride must be >= 1")
    if not d.areas or any(a < 1 or a > cfg.grid.area_count for a in d.areas) or len(set(d.areas)) != len(d.areas):
        raise ConfigError(f"dataset.areas={list(d.areas)} is not a subset of 1..{cfg.grid.area_count}")
    if len(d.fractions) != 3 or abs(sum(d.fractions) - 1) > 1e-9 or min(d.fractions) <= 0:
        raise ConfigError("dataset.fractions must be three positive numbers summing to 1")
    if min(cfg.simulate.counts().values()) < 0:
        raise ConfigError("simulate counts must be non-negative")
    if cfg.train.epochs < 0 or cfg.train.batch_size < 1:
        raise ConfigError("train.epochs must be >= 0 and train.batch_size >= 1")
    if cfg.forest.n_estimators < 1:
        raise ConfigError("forest.n_estimators must be >= 1")
    if cfg.workers is not None and cfg.workers < 1:
        raise ConfigError("workers must be >= 1")
    ws = int(d.w1 // cfg.grid.slot_seconds)
    if ws > cfg.grid.trace_length:
        raise ConfigError(f"window of {ws} samples exceeds trace length {cfg.grid.trace_length}")
    try:
        cfg.pipeline().model_config(ws)
        cfg.grid.sync
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg


def from_dict(data: dict) -> RunConfig:
    return validate(_build(RunConfig, data, ""))


def load_config(path=None) -> RunConfig:
    if path is None:
        return validate(RunConfig())
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from exc
    return from_dict(data or {})


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
