"""Experiment configuration: one JSON object, dotted-path overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

FORMAT_VERSION = "dovmeta-1"

# JSON keys that are Python keywords
_KEY_ALIASES = {"lambda": "lambda_"}
_FIELD_ALIASES = {v: k for k, v in _KEY_ALIASES.items()}


class ConfigError(ValueError):
    pass


@dataclass
class EnvConfig:
    family: str = "line_vel"
    goals: int | None = None
    physics: list | None = None
    reset_noise: float = 0.0
    # DoV name -> label indices removed from the training grid (unseen labels)
    holdout: dict = field(default_factory=dict)


@dataclass
class ExperimentConfig:
    env: EnvConfig = field(default_factory=EnvConfig)
    alpha: float = 0.5
    seed: int = 0

    iterations: int = 100
    steps_per_iteration: int = 100
    rollouts_per_task: int = 2
    context_size: int = 32
    context_window_episodes: int = 2
    buffer_capacity: int = 20000
    max_tasks_per_step: int = 40
    task_subsample: int = 16

    latent_dim: int = 5
    num_dovs: int | None = None
    encoder_hidden: list = field(default_factory=lambda: [32, 32])
    policy_hidden: list = field(default_factory=lambda: [32, 32])

    lambda_: float = 10.0
    tau: float = 0.99
    beta: float = 0.01

    gamma: float = 0.99
    soft_update_rate: float = 0.005
    entropy_coef: float = 0.2
    batch_size: int = 32
    lr_encoder: float = 1e-3
    lr_actor: float = 1e-3
    lr_critic: float = 1e-3
    reward_scale: float = 5.0

    eval_every: int = 10
    eval_episodes: int = 10
    rollout_budget: int = 2
    metatest_trajectories: int = 8
    sample_s1: bool = False
    sample_prior: bool = False

    pearl_baseline: bool = False
    sac_baseline: bool = False
    no_ema: bool = False

    out_dir: str = "out"
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.env, dict):
            self.env = _build(EnvConfig, self.env, "env.")
        self.validate()

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")
        if not 0.0 <= self.tau < 1.0:
            raise ConfigError("tau must lie in [0, 1)")
        positive = ["iterations", "steps_per_iteration", "rollouts_per_task", "context_size",
                    "context_window_episodes", "buffer_capacity", "latent_dim", "batch_size",
                    "eval_episodes", "rollout_budget", "metatest_trajectories", "eval_every", "jobs",
                    "max_tasks_per_step", "task_subsample"]
        for name in positive:
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("lambda_", "beta", "entropy_coef", "reward_scale"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{_FIELD_ALIASES.get(name, name)} must be >= 0")
        if self.pearl_baseline and self.sac_baseline:
            raise ConfigError("pearl_baseline and sac_baseline are mutually exclusive")

    # effective settings after mode flags

    @property
    def effective_tau(self) -> float:
        return 0.0 if self.no_ema else self.tau

    @property
    def effective_lambda(self) -> float:
        return 0.0 if (self.pearl_baseline or self.sac_baseline) else self.lambda_

    def effective_num_dovs(self, env_dovs: int) -> int:
        if self.sac_baseline:
            return 0
        if self.pearl_baseline:
            return 1
        return env_dovs if self.num_dovs is None else self.num_dovs

    @property
    def agent_kind(self) -> str:
        if self.sac_baseline:
            return "sac"
        if self.pearl_baseline or self.num_dovs == 1:
            return "pearl"
        return "ours"

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"seed{self.seed}"

    def to_dict(self) -> dict:
        raw = dataclasses.asdict(self)
        return {_FIELD_ALIASES.get(k, k): v for k, v in raw.items()}

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        return _build(cls, data, "")

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        for key, value in changes.items():
            _set_path(data, key, value)
        return ExperimentConfig.from_dict(data)

    def with_overrides(self, assignments) -> "ExperimentConfig":
        """Apply ``key=value`` strings; values parse as JSON, falling back to strings."""
        data = self.to_dict()
        for item in assignments:
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not key=value")
            key, raw = item.split("=", 1)
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            _set_path(data, key.strip(), value)
        return ExperimentConfig.from_dict(data)


def _set_path(data: dict, dotted: str, value) -> None:
    parts = dotted.split(".")
    node = data
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def _build(cls, data: dict, prefix: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix or 'config'} must be an object")
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        name = _KEY_ALIASES.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if isinstance(data, dict) and "format_version" in data and "config" in data:
        data = data["config"]
    return ExperimentConfig.from_dict(data)


def save_config(config: ExperimentConfig, path) -> None:
    payload = {"format_version": FORMAT_VERSION, "config": config.to_dict()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
