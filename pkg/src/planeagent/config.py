"""Experiment configuration: one sectioned YAML file, every seed explicit."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .agent import AgentConfig
from .termination import VARIANTS, TerminationConfig
from .volume import PLANE_TYPES

METHODS = (
    "gt_oracle",
    "warm_start",
    "ddqn_na",
    "ddqn_maxs",
    "ddqn_minq",
    "ddqn_at_fc",
    "ddqn_at_rnn",
    "ddqn_at_lstm",
)


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    count: int = 80
    dims: tuple = (96, 96, 96)
    spacing: float = 0.5
    max_rotation: float = 30.0
    max_translation: float = 3.0
    scale_range: tuple = (0.9, 1.1)
    speckle: float = 0.2
    train_fraction: float = 0.75
    test_fraction: float = 0.25
    seed: int = 0

    def validate(self):
        if self.count < 2:
            raise ConfigError("dataset.count must be at least 2")
        if min(self.train_fraction, self.test_fraction) <= 0 or abs(self.train_fraction + self.test_fraction - 1.0) > 1e-9:
            raise ConfigError("dataset split fractions must be positive and sum to 1")
        if len(self.dims) != 3 or min(self.dims) < 8:
            raise ConfigError("dataset.dims must be three sizes >= 8")
        if self.spacing <= 0:
            raise ConfigError("dataset.spacing must be positive")


@dataclass
class AgentSection:
    gamma: float = 0.9
    lr: float = 5e-5
    sync_period: int = 2000
    max_steps: int = 100
    train_episode_steps: int = 30
    init_angle_range: float = 25.0
    init_dist_range: float = 10.0
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_fraction: float = 0.25
    batch_size: int = 32
    buffer_capacity: int = 15000
    warmup: int = 1000
    angle_step: float = 1.0
    dist_step: float = 0.5
    slice_size: int = 64
    slice_res: float = 1.0
    total_steps: int = 20000
    log_every: int = 500
    checkpoint_every: int = 5000
    seed: int = 0

    def agent_config(self) -> AgentConfig:
        names = {f.name for f in dataclasses.fields(AgentConfig)}
        return AgentConfig(**{k: v for k, v in dataclasses.asdict(self).items() if k in names})

    def validate(self):
        if self.total_steps < 0 or self.log_every <= 0 or self.checkpoint_every <= 0:
            raise ConfigError("agent.total_steps must be >= 0 and logging/checkpoint periods positive")
        try:
            self.agent_config()
        except ValueError as exc:
            raise ConfigError(f"agent: {exc}") from exc


@dataclass
class TerminationSection:
    variants: tuple = VARIANTS
    hidden: int = 64
    epochs: int = 200
    batch_size: int = 100
    lr: float = 1e-3
    seed: int = 0

    def model_config(self, variant: str) -> TerminationConfig:
        return TerminationConfig(variant, self.hidden, self.epochs, self.batch_size, self.lr, self.seed)

    def validate(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"termination variant {v!r} not in {VARIANTS}")
        try:
            self.model_config(VARIANTS[0])
        except ValueError as exc:
            raise ConfigError(f"termination: {exc}") from exc


@dataclass
class EvaluationSection:
    methods: tuple = METHODS
    max_steps: int = 100
    far_angle_range: float = 60.0
    far_dist_range: float = 20.0
    landmark_source: str = "detect"  # or "oracle": ground truth plus Gaussian noise
    landmark_noise: float = 2.0
    seed: int = 0

    def validate(self):
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown evaluation method {m!r}")
        if self.landmark_source not in ("detect", "oracle"):
            raise ConfigError("evaluation.landmark_source must be 'detect' or 'oracle'")
        if self.max_steps < 0:
            raise ConfigError("evaluation.max_steps must be >= 0")


@dataclass
class PathsSection:
    data: str = "data"
    runs: str = "runs"


_SECTIONS = {
    "dataset": DatasetSection,
    "agent": AgentSection,
    "termination": TerminationSection,
    "evaluation": EvaluationSection,
    "paths": PathsSection,
}


@dataclass
class ExperimentConfig:
    plane_type: str = "TT"
    workers: int = 1
    dataset: DatasetSection = field(default_factory=DatasetSection)
    agent: AgentSection = field(default_factory=AgentSection)
    termination: TerminationSection = field(default_factory=TerminationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def validate(self) -> "ExperimentConfig":
        if self.plane_type not in PLANE_TYPES:
            raise ConfigError(f"plane_type must be one of {PLANE_TYPES}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in ("dataset", "agent", "termination", "evaluation"):
            getattr(self, name).validate()
        needed = {m[len("ddqn_at_"):] for m in self.evaluation.methods if m.startswith("ddqn_at_")}
        missing = needed - set(self.termination.variants)
        if missing:
            raise ConfigError(f"evaluation needs termination variants that are not trained: {sorted(missing)}")
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for sec in d.values():
            if isinstance(sec, dict):
                for k, v in sec.items():
                    if isinstance(v, tuple):
                        sec[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, raw: dict | None) -> "ExperimentConfig":
        raw = dict(raw or {})
        kwargs = {}
        for key, value in raw.items():
            if key in _SECTIONS:
                kwargs[key] = _build_section(_SECTIONS[key], key, value)
            elif key in ("plane_type", "workers"):
                kwargs[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        try:
            cfg = cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        if raw is not None and not isinstance(raw, dict):
            raise ConfigError("config root must be a mapping")
        return cls.from_dict(raw)

    def save(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    def override(self, dotted: dict) -> "ExperimentConfig":
        """New config with ``{"section.key": value}`` entries replaced."""
        d = self.to_dict()
        for key, value in dotted.items():
            if value is None:
                continue
            parts = key.split(".")
            node = d
            for p in parts[:-1]:
                node = node.setdefault(p, {})
            node[parts[-1]] = value
        return ExperimentConfig.from_dict(d)


def _build_section(kind, name: str, value):
    if value is None:
        return kind()
    if not isinstance(value, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    known = {f.name: f for f in dataclasses.fields(kind)}
    for k in value:
        if k not in known:
            raise ConfigError(f"unknown key {name}.{k}")
    coerced = {}
    for k, v in value.items():
        default = known[k].default
        if isinstance(default, tuple) and isinstance(v, list):
            v = tuple(v)
        elif isinstance(default, float) and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        elif isinstance(default, int) and not isinstance(default, bool) and not isinstance(v, int):
            raise ConfigError(f"{name}.{k} must be an integer")
        coerced[k] = v
    return kind(**coerced)
