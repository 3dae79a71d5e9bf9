"""Model state shared by training and evaluation, plus the batched episode runner."""
from __future__ import annotations

import hashlib
import json
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import FORMAT_VERSION, ExperimentConfig
from .encoder import DovEncoder, flatten_transitions, transition_dim
from .envs import EnvFamily, TaskInstance, build_task_grid, make_family, select_training_tasks, stack_params
from .numerics import Adam, DiagGaussian
from .sac import Actor, CriticPair, SacHyper, act
from .targets import TargetTable


class Agent:
    """Encoders, actor, critics, EMA targets and the task split of one experiment."""

    def __init__(self, config: ExperimentConfig):
        self.config = config
        env = config.env
        self.family: EnvFamily = make_family(env.family, env.goals, env.physics, env.reset_noise)
        spec = self.family.spec
        self.env_dovs = spec.num_dovs
        holdout = {k: [int(v) for v in vs] for k, vs in env.holdout.items()}

        seeds = np.random.SeedSequence(config.seed).spawn(3)
        split_rng, init_rng = np.random.default_rng(seeds[0]), np.random.default_rng(seeds[1])
        self.stream_seed = seeds[2]

        self.all_tasks = build_task_grid(self.family)
        grid = build_task_grid(self.family, exclude=holdout)
        self.train_tasks, self.test_tasks = select_training_tasks(grid, config.alpha, split_rng)
        grid_ids = {t.task_id for t in grid}
        self.holdout_tasks = [t for t in self.all_tasks if t.task_id not in grid_ids]
        self.holdout = holdout

        self.num_blocks = config.effective_num_dovs(self.env_dovs)
        if self.num_blocks not in (0, 1, self.env_dovs):
            raise ValueError(f"num_dovs must be 0, 1 or {self.env_dovs}")
        # an undivided encoder gets the same total latent size as the split one
        self.block_dim = config.latent_dim if self.num_blocks == self.env_dovs else config.latent_dim * self.env_dovs
        if self.num_blocks == 0:
            self.block_dim = 0

        obs_dim, act_dim = self.family.obs_dim, self.family.act_dim
        self.in_dim = transition_dim(obs_dim, act_dim)
        self.encoder = DovEncoder(self.num_blocks, self.in_dim, self.block_dim, config.encoder_hidden, init_rng)
        emb = self.embedding_dim
        self.actor = Actor(obs_dim, act_dim, emb, config.policy_hidden, init_rng)
        self.critics = CriticPair(obs_dim, act_dim, emb, config.policy_hidden, init_rng)
        self.hyper = SacHyper(config.gamma, config.soft_update_rate, config.entropy_coef, config.batch_size,
                              config.lr_encoder, config.lr_actor, config.lr_critic, config.reward_scale)
        self.opt_encoder = Adam(self.encoder.params(), lr=config.lr_encoder)
        self.opt_actor = Adam(self.actor.net.params, lr=config.lr_actor)
        self.opt_critic = Adam(self.critics.params(), lr=config.lr_critic)
        self.table = TargetTable(config.effective_tau)
        # last posterior mean blocks seen in training, per training task id
        self.train_posterior_means: dict[int, list[np.ndarray]] = {}

    @property
    def embedding_dim(self) -> int:
        return self.num_blocks * self.block_dim

    @property
    def kind(self) -> str:
        return self.config.agent_kind

    def block_labels(self, task: TaskInstance) -> tuple:
        if self.num_blocks == self.env_dovs:
            return task.combo
        if self.num_blocks == 1:
            return (task.combo,)
        return ()

    def task_by_id(self, task_id: int) -> TaskInstance:
        for t in self.all_tasks:
            if t.task_id == task_id:
                return t
        raise KeyError(f"no task with id {task_id}")

    def rng_streams(self, n: int) -> list[np.random.Generator]:
        return [np.random.default_rng(s) for s in self.stream_seed.spawn(n)]

    # task inference

    def infer(self, contexts: np.ndarray):
        """Posterior (means, vars) per block for contexts of shape ``(T, N, in_dim)``."""
        result = self.encoder.encode(contexts)
        return result.means, result.variances

    def embed(self, contexts: np.ndarray, rng: np.random.Generator | None, sample: bool = True) -> np.ndarray:
        if self.num_blocks == 0:
            return np.zeros((len(contexts), 0))
        means, variances = self.infer(contexts)
        blocks = []
        for m, v in zip(means, variances):
            blocks.append(m + np.sqrt(v) * rng.standard_normal(m.shape) if sample else m)
        return np.concatenate(blocks, axis=-1)

    def empty_contexts(self, n: int) -> np.ndarray:
        return np.zeros((n, 0, self.in_dim))

    def posteriors_of(self, contexts: np.ndarray, i: int) -> list[DiagGaussian]:
        means, variances = self.infer(contexts[i:i + 1])
        return [DiagGaussian(m[0], v[0]) for m, v in zip(means, variances)]


class Episodes:
    """Transitions of L parallel episodes, arrays shaped ``(L, H, ...)``."""

    def __init__(self, obs, actions, rewards, next_obs):
        self.obs, self.actions, self.rewards, self.next_obs = obs, actions, rewards, next_obs

    @property
    def returns(self) -> np.ndarray:
        return self.rewards.sum(axis=1)

    def flat(self) -> np.ndarray:
        return flatten_transitions(self.obs, self.actions, self.next_obs, self.rewards)


def run_episodes(agent: Agent, tasks: Sequence[TaskInstance], z: np.ndarray, deterministic: bool,
                 rng: np.random.Generator, interactions: Counter | None = None) -> Episodes:
    """One episode per lane; lane ``i`` runs ``tasks[i]`` conditioned on ``z[i]``."""
    family = agent.family
    params = stack_params(tasks)
    L, H = len(tasks), family.horizon
    state = family.reset(params, rng)
    obs = np.zeros((L, H, family.obs_dim))
    actions = np.zeros((L, H, family.act_dim))
    rewards = np.zeros((L, H))
    next_obs = np.zeros((L, H, family.obs_dim))
    for t in range(H):
        a = act(agent.actor, state, z, deterministic=deterministic, rng=rng)
        nxt, r, _ = family.step(params, state, a, t)
        obs[:, t], actions[:, t], rewards[:, t], next_obs[:, t] = state, a, r, nxt
        state = nxt
    if interactions is not None:
        for task in tasks:
            interactions[task.task_id] += H
    return Episodes(obs, actions, rewards, next_obs)


def sample_rows(rows: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniformly draw ``n`` transitions with replacement from rows ``(T, M, in_dim)``."""
    T, M = rows.shape[:2]
    idx = rng.integers(0, M, size=(T, n))
    return rows[np.arange(T)[:, None], idx]


# checkpoints: one JSON document, arrays as nested float lists (exact repr round-trip)

def _arrays(params: Sequence[np.ndarray]) -> list:
    return [p.tolist() for p in params]


def _load_into(params: Sequence[np.ndarray], data: list) -> None:
    if len(params) != len(data):
        raise ValueError("checkpoint parameter count mismatch")
    for p, d in zip(params, data):
        arr = np.array(d, dtype=np.float64).reshape(p.shape)
        p[...] = arr


def checkpoint_payload(agent: Agent) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": agent.config.to_dict(),
        "split": {
            "train": [t.task_id for t in agent.train_tasks],
            "test": [t.task_id for t in agent.test_tasks],
            "holdout": [t.task_id for t in agent.holdout_tasks],
        },
        "encoder": [_arrays(net.params) for net in agent.encoder.nets],
        "actor": _arrays(agent.actor.net.params),
        "critics": [_arrays(net.params) for net in agent.critics.q],
        "target_critics": [_arrays(net.params) for net in agent.critics.target],
        "targets": {"tau": agent.table.tau, "entries": agent.table.to_records()},
        "train_posterior_means": {
            str(k): [b.tolist() for b in v] for k, v in sorted(agent.train_posterior_means.items())
        },
    }


def save_checkpoint(agent: Agent, path) -> str:
    """Write the checkpoint and return its SHA-256 digest."""
    text = json.dumps(checkpoint_payload(agent), sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_checkpoint(path) -> Agent:
    data = json.loads(Path(path).read_text())
    if data.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {data.get('format_version')!r}")
    agent = Agent(ExperimentConfig.from_dict(data["config"]))
    split = data["split"]
    if [t.task_id for t in agent.train_tasks] != split["train"]:
        raise ValueError("checkpoint task split does not match its config")
    for net, arrays in zip(agent.encoder.nets, data["encoder"]):
        _load_into(net.params, arrays)
    _load_into(agent.actor.net.params, data["actor"])
    for net, arrays in zip(agent.critics.q, data["critics"]):
        _load_into(net.params, arrays)
    for net, arrays in zip(agent.critics.target, data["target_critics"]):
        _load_into(net.params, arrays)
    agent.table = TargetTable.from_records(data["targets"]["tau"], data["targets"]["entries"])
    agent.train_posterior_means = {
        int(k): [np.array(b, dtype=np.float64) for b in v] for k, v in data["train_posterior_means"].items()
    }
    return agent
