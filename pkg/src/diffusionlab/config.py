"""Experiment configuration: dataclasses with strict YAML round-tripping.

Unknown keys are rejected rather than ignored, so a typo in a config file
fails loudly instead of silently running defaults.
"""

from __future__ import annotations

import dataclasses
import hashlib
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from .datasets import Dataset, load_idx, make_synthetic
from .envvars import ENV_OUTPUT_DIR
from .errors import ConfigError
from .models import AnalyticGaussianEps, init_mlp
from .schedules import make_cosine_schedule, make_linear_schedule, respace
from .training import TrainConfig


@dataclass
class DatasetSection:
    kind: str = "two_moons"
    n: int = 4096
    seed: int = 0
    params: dict = field(default_factory=dict)
    path: str | None = None
    holdout: int = 1024

    def build(self) -> Dataset:
        if self.kind == "idx_images":
            if not self.path:
                raise ConfigError("dataset.kind idx_images requires dataset.path")
            return load_idx(self.path)
        return make_synthetic(self.kind, self.n, self.params, seed=self.seed)

    def split(self, dataset: Dataset):
        """(train part, reference part); holdout=0 reuses the full set for both."""
        if self.holdout <= 0:
            return dataset, dataset
        if self.holdout >= dataset.n:
            raise ConfigError(f"holdout {self.holdout} must be smaller than dataset size {dataset.n}")
        return dataset.split(self.holdout)


@dataclass
class ScheduleSection:
    kind: str = "linear"
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    s: float = 0.008
    beta_clip: float = 0.999

    def build(self):
        if self.kind == "linear":
            return make_linear_schedule(self.T, self.beta_start, self.beta_end)
        if self.kind == "cosine":
            return make_cosine_schedule(self.T, self.s, self.beta_clip)
        raise ConfigError(f"unknown schedule kind {self.kind!r}")


@dataclass
class ModelSection:
    kind: str = "mlp"
    hidden: list = field(default_factory=lambda: [256, 256, 256, 256])
    time_dim: int = 64
    max_period: float = 10000.0
    dtype: str = "float32"
    mu0: list | None = None
    sigma0_sq: float = 1.0

    def build(self, data_dim: int, seed: int):
        if self.kind == "mlp":
            sizes = [data_dim + self.time_dim, *[int(h) for h in self.hidden], data_dim]
            return init_mlp(
                sizes,
                seed=seed,
                time_dim=self.time_dim,
                max_period=self.max_period,
                dtype=np.dtype(self.dtype),
            )
        if self.kind == "analytic_gaussian":
            mu0 = self.mu0 if self.mu0 is not None else [0.0] * data_dim
            return AnalyticGaussianEps(mu0, self.sigma0_sq)
        raise ConfigError(f"unknown model kind {self.kind!r}")


@dataclass
class SamplerSection:
    kind: str = "ancestral"
    eta: float = 0.0
    num_steps: int | None = None
    variance_choice: str = "posterior_small"
    n_samples: int = 2048

    def view(self, schedule):
        if self.num_steps is None or self.num_steps == len(schedule.betas):
            return schedule
        return respace(schedule, self.num_steps)


@dataclass
class EvalSection:
    t_grid: list = field(default_factory=lambda: [100, 300, 600, 1000])
    n_draws: int = 2000
    stride: int = 10
    n_samples: int = 200
    k: int = 3
    metric: str = "energy"
    mode: str = "generation"


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs/exp"
    dataset: DatasetSection = field(default_factory=DatasetSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)


_SECTION_TYPES = {
    "dataset": DatasetSection,
    "schedule": ScheduleSection,
    "model": ModelSection,
    "train": TrainConfig,
    "sampler": SamplerSection,
    "eval": EvalSection,
}


def _fill_dataclass(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {path or 'top level'} must be a mapping, got {type(data).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s) at {path or 'top level'}: {', '.join(unknown)}")
    return cls(**data)


def config_from_dict(data: dict) -> ExperimentConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top_names = {f.name for f in dataclasses.fields(ExperimentConfig)}
    unknown = sorted(set(data) - top_names)
    if unknown:
        raise ConfigError(f"unknown config key(s) at top level: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _SECTION_TYPES:
            kwargs[key] = _fill_dataclass(_SECTION_TYPES[key], value, key)
        else:
            kwargs[key] = value
    cfg = ExperimentConfig(**kwargs)
    try:
        cfg.train.validate()
    except ValueError as e:
        raise ConfigError(f"train section invalid: {e}")
    return cfg


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            data = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}")
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path):
    with open(path, "w") as f:
        yaml.safe_dump(config_to_dict(cfg), f, sort_keys=True)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(65536), b""):
            h.update(block)
    return h.hexdigest()


def resolve_output_dir(configured: str, cli_override: str | None = None) -> str:
    """Precedence: CLI flag, then environment override, then the config value."""
    if cli_override:
        return cli_override
    env = os.environ.get(ENV_OUTPUT_DIR)
    if env:
        return env
    return configured
