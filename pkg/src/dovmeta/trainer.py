"""Meta-training loop: per-task replay, context-growing collection, joint updates."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import Agent, run_episodes, save_checkpoint
from .config import ExperimentConfig, save_config
from .encoder import flatten_transitions
from .numerics import DiagGaussian, kl_terms
from .sac import Batch, actor_loss, critic_loss
from .targets import disentangle_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "iteration", "wall_seconds", "mean_train_return", "mean_test_return_metatest",
    "mean_test_return_zeroshot", "loss_actor", "loss_critic", "loss_prior_kl", "loss_dis",
)


class ReplayBuffer:
    """One FIFO ring buffer per task, stored along a leading task axis."""

    def __init__(self, n_tasks: int, obs_dim: int, act_dim: int, capacity: int):
        self.capacity = int(capacity)
        self.obs = np.zeros((n_tasks, capacity, obs_dim))
        self.actions = np.zeros((n_tasks, capacity, act_dim))
        self.rewards = np.zeros((n_tasks, capacity))
        self.next_obs = np.zeros((n_tasks, capacity, obs_dim))
        self.cursor = np.zeros(n_tasks, dtype=np.int64)
        self.count = np.zeros(n_tasks, dtype=np.int64)

    def add(self, i: int, obs, actions, rewards, next_obs) -> None:
        n = len(rewards)
        idx = (self.cursor[i] + np.arange(n)) % self.capacity
        self.obs[i, idx] = obs
        self.actions[i, idx] = actions
        self.rewards[i, idx] = rewards
        self.next_obs[i, idx] = next_obs
        self.cursor[i] = (self.cursor[i] + n) % self.capacity
        self.count[i] = min(self.count[i] + n, self.capacity)

    def _gather(self, tasks: np.ndarray, idx: np.ndarray):
        rows = tasks[:, None]
        return self.obs[rows, idx], self.actions[rows, idx], self.rewards[rows, idx], self.next_obs[rows, idx]

    def sample(self, tasks: np.ndarray, n: int, rng: np.random.Generator):
        """Uniform draws over each task's contents; arrays shaped ``(T, n, ...)``."""
        counts = self.count[tasks]
        idx = (rng.random((len(tasks), n)) * counts[:, None]).astype(np.int64)
        return self._gather(tasks, idx)

    def sample_recent(self, tasks: np.ndarray, n: int, window: int, rng: np.random.Generator):
        """Uniform draws over each task's most recent ``window`` transitions."""
        w = np.minimum(self.count[tasks], window)
        back = (rng.random((len(tasks), n)) * w[:, None]).astype(np.int64)
        idx = (self.cursor[tasks][:, None] - 1 - back) % self.capacity
        return self._gather(tasks, idx)

    def context(self, tasks: np.ndarray, n: int, window: int, rng: np.random.Generator) -> np.ndarray:
        return flatten_transitions(*_reorder(self.sample_recent(tasks, n, window, rng)))


def _reorder(sample):
    obs, actions, rewards, next_obs = sample
    return obs, actions, next_obs, rewards


def make_buffer(agent: Agent) -> ReplayBuffer:
    fam = agent.family
    return ReplayBuffer(len(agent.train_tasks), fam.obs_dim, fam.act_dim, agent.config.buffer_capacity)


def collect_rollouts(agent: Agent, buffer: ReplayBuffer, rng: np.random.Generator,
                     task_idx: Sequence[int] | None = None, K: int | None = None) -> np.ndarray:
    """K episodes per task with a context that grows from empty.

    Episode 1 conditions on a prior sample; later episodes condition on a
    posterior sample given ``N`` transitions drawn from the task's most
    recent window. Returns the per-episode returns, shape ``(K, T)``.
    """
    cfg = agent.config
    K = cfg.rollouts_per_task if K is None else K
    task_idx = np.arange(len(agent.train_tasks)) if task_idx is None else np.asarray(task_idx)
    window = cfg.context_window_episodes * agent.family.horizon
    returns = []
    contexts = agent.empty_contexts(len(task_idx))
    for k in range(K):
        if agent.num_blocks == 0:
            # the multi-task baseline draws a training task per episode
            lanes = rng.integers(0, len(agent.train_tasks), size=len(task_idx))
        else:
            lanes = task_idx
        z = agent.embed(contexts, rng, sample=True)
        eps = run_episodes(agent, [agent.train_tasks[i] for i in lanes], z, deterministic=False, rng=rng)
        for lane, i in enumerate(lanes):
            buffer.add(int(i), eps.obs[lane], eps.actions[lane], eps.rewards[lane], eps.next_obs[lane])
        returns.append(eps.returns)
        if agent.num_blocks:
            # the accumulated context starts empty: only this call's episodes feed it
            recent = min(window, (k + 1) * agent.family.horizon)
            contexts = buffer.context(task_idx, cfg.context_size, recent, rng)
    return np.array(returns)


@dataclass
class StepInputs:
    """Everything random about one training step, drawn up front."""

    task_idx: np.ndarray
    contexts: np.ndarray          # (T, N, in_dim)
    batch: Batch                  # T * B rows, task-major
    z_noise: list                 # per block, (T, d)
    next_noise: np.ndarray        # (T * B, act_dim)
    actor_noise: np.ndarray       # (T * B, act_dim)

    @property
    def n_tasks(self) -> int:
        return len(self.task_idx)


def sample_step_inputs(agent: Agent, buffer: ReplayBuffer, task_idx, rng: np.random.Generator) -> StepInputs:
    cfg = agent.config
    task_idx = np.asarray(task_idx)
    T, B = len(task_idx), cfg.batch_size
    window = cfg.context_window_episodes * agent.family.horizon
    if agent.num_blocks:
        contexts = buffer.context(task_idx, cfg.context_size, window, rng)
    else:
        contexts = agent.empty_contexts(T)
    obs, actions, rewards, next_obs = buffer.sample(task_idx, B, rng)
    batch = Batch(obs.reshape(T * B, -1), actions.reshape(T * B, -1), rewards.reshape(T * B),
                  next_obs.reshape(T * B, -1), np.zeros(T * B))
    z_noise = [rng.standard_normal((T, agent.block_dim)) for _ in range(agent.num_blocks)]
    act_dim = agent.family.act_dim
    next_noise = rng.standard_normal((T * B, act_dim))
    actor_noise = rng.standard_normal((T * B, act_dim))
    return StepInputs(task_idx, contexts, batch, z_noise, next_noise, actor_noise)


@dataclass
class StepResult:
    losses: dict
    encoder_grads: list
    actor_grads: list
    critic_grads: list
    posteriors: list              # per task: list of DiagGaussian per block
    critic_targets: np.ndarray


def compute_step(agent: Agent, inputs: StepInputs, table=None, update_table: bool = True,
                 critic_targets=None) -> StepResult:
    """Losses and gradients for one step at the current parameters.

    The encoder objective is ``sum_i (L_critic^i + beta * KL_i + L_dis^i)``
    with per-task critic losses averaged over that task's rows. Each task is
    scored against ``table`` before its posteriors are folded into the EMA
    (skipped with ``update_table=False``); ``table=None`` drops L_dis.
    Bellman backups and EMA targets are constants for differentiation;
    ``critic_targets`` lets a caller pin the backup values.
    """
    cfg = agent.config
    T = inputs.n_tasks
    B = len(inputs.batch) // T
    lam, beta = cfg.effective_lambda, cfg.beta
    enc = agent.encoder.encode(inputs.contexts)

    blocks, d_means, d_vars = [], [], []
    kl_total = 0.0
    for j in range(agent.num_blocks):
        mean, var = enc.means[j], enc.variances[j]
        std = np.sqrt(var)
        blocks.append(mean + std * inputs.z_noise[j])
        kl, dm, dv = kl_terms(mean, var, 0.0, 1.0)
        kl_total += float(kl.sum())
        d_means.append(beta * dm)
        d_vars.append(beta * dv)
    z = np.concatenate(blocks, axis=-1) if blocks else np.zeros((T, 0))

    posteriors = []
    dis_total = 0.0
    for i in range(T):
        task = agent.train_tasks[inputs.task_idx[i]]
        labels = agent.block_labels(task)
        posts = [DiagGaussian(enc.means[j][i], enc.variances[j][i]) for j in range(agent.num_blocks)]
        posteriors.append(posts)
        if table is not None and agent.num_blocks:
            loss_i, gm, gv = disentangle_loss(table, labels, posts, lam, with_grad=True)
            dis_total += loss_i
            for j in range(agent.num_blocks):
                d_means[j][i] += gm[j]
                d_vars[j][i] += gv[j]
            if update_table:
                for j, y in enumerate(labels):
                    table.ema_update(j, y, posts[j])

    z_rows = np.repeat(z, B, axis=0)
    l_critic, critic_grads, d_z_rows, info = critic_loss(
        agent.critics, agent.actor, inputs.batch, z_rows, z_rows, agent.hyper, inputs.next_noise,
        targets=critic_targets)
    l_actor, actor_grads, _ = actor_loss(agent.actor, agent.critics, inputs.batch, z_rows, agent.hyper,
                                         inputs.actor_noise)

    # critic loss is a mean over all T*B rows; the encoder objective sums per-task means
    d_z = T * d_z_rows.reshape(T, B, -1).sum(axis=1)
    d = agent.block_dim
    for j in range(agent.num_blocks):
        dz_j = d_z[:, j * d:(j + 1) * d]
        d_means[j] = d_means[j] + dz_j
        d_vars[j] = d_vars[j] + dz_j * inputs.z_noise[j] / (2.0 * np.sqrt(enc.variances[j]))
    encoder_grads = agent.encoder.backward(enc, d_means, d_vars) if agent.num_blocks else []

    losses = {
        "actor": l_actor,
        "critic": l_critic,
        "prior_kl": kl_total / T,
        "dis": dis_total / T,
        "encoder_objective": T * l_critic + beta * kl_total + dis_total,
    }
    return StepResult(losses, encoder_grads, actor_grads, critic_grads, posteriors, info["targets"])


def apply_step(agent: Agent, result: StepResult, inputs: StepInputs) -> None:
    if agent.num_blocks:
        agent.opt_encoder.step([g for net_grads in result.encoder_grads for g in net_grads])
    agent.opt_actor.step(result.actor_grads)
    agent.opt_critic.step(result.critic_grads)
    agent.critics.soft_update(agent.hyper.soft_update_rate)
    for i, posts in zip(inputs.task_idx, result.posteriors):
        agent.train_posterior_means[agent.train_tasks[i].task_id] = [p.mean.copy() for p in posts]


def step_tasks(agent: Agent, rng: np.random.Generator) -> np.ndarray:
    cfg = agent.config
    n = len(agent.train_tasks)
    if n <= cfg.max_tasks_per_step:
        return np.arange(n)
    return np.sort(rng.choice(n, size=cfg.task_subsample, replace=False))


def train_step(agent: Agent, buffer: ReplayBuffer, rng: np.random.Generator, task_idx=None) -> dict | None:
    """One joint update; tasks with fewer than ``batch_size`` transitions are skipped."""
    task_idx = step_tasks(agent, rng) if task_idx is None else np.asarray(task_idx)
    ready = buffer.count[task_idx] >= agent.config.batch_size
    if not ready.all():
        log.warning("skipping %d under-filled task buffers", int((~ready).sum()))
        task_idx = task_idx[ready]
    if len(task_idx) == 0:
        return None
    inputs = sample_step_inputs(agent, buffer, task_idx, rng)
    result = compute_step(agent, inputs, agent.table)
    apply_step(agent, result, inputs)
    return result.losses


def train_return(agent: Agent, buffer: ReplayBuffer, rng: np.random.Generator) -> float:
    """Deterministic return on training tasks, embedding = posterior mean of a buffer context."""
    from .zeroshot import run_eval_episodes

    cfg = agent.config
    idx = np.arange(len(agent.train_tasks))
    if agent.num_blocks and buffer.count.min() > 0:
        window = cfg.context_window_episodes * agent.family.horizon
        z = agent.embed(buffer.context(idx, cfg.context_size, window, rng), rng, sample=False)
    else:
        z = np.zeros((len(idx), agent.embedding_dim))
    return float(run_eval_episodes(agent, agent.train_tasks, z, 1, rng).mean())


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


@dataclass
class RunResult:
    agent: Agent
    buffer: ReplayBuffer
    metrics: list
    checkpoint_digest: str | None = None


def run(config: ExperimentConfig, write: bool = True, progress: bool = False) -> RunResult:
    """Full meta-training; writes config echo, per-iteration metrics and a checkpoint."""
    from . import zeroshot

    agent = Agent(config)
    buffer = make_buffer(agent)
    collect_rng, train_rng, eval_rng = agent.rng_streams(3)
    out = config.run_dir()
    if write:
        try:
            out.mkdir(parents=True, exist_ok=True)
            save_config(config, out / "config.json")
        except OSError as exc:
            raise OSError(f"cannot prepare output directory {out}: {exc}") from exc

    metrics = []
    start = time.perf_counter()

    def evaluate_row(iteration, losses):
        row = {"iteration": iteration, "wall_seconds": time.perf_counter() - start}
        row["mean_train_return"] = train_return(agent, buffer, eval_rng)
        row["mean_test_return_metatest"] = float("nan")
        row["mean_test_return_zeroshot"] = float("nan")
        if agent.test_tasks and agent.num_blocks:
            row["mean_test_return_metatest"] = zeroshot.evaluate_metatest(agent, agent.test_tasks, eval_rng).mean
            if agent.kind == "ours":
                try:
                    row["mean_test_return_zeroshot"] = zeroshot.evaluate_s1(agent, agent.test_tasks, eval_rng).mean
                except zeroshot.MissingLabelError:
                    pass
        elif agent.test_tasks:
            row["mean_test_return_zeroshot"] = zeroshot.evaluate_sac(agent, agent.test_tasks, eval_rng).mean
        for key in ("actor", "critic", "prior_kl", "dis"):
            row[f"loss_{key}"] = losses.get(key, float("nan"))
        metrics.append(row)
        if progress:
            log.info("iter %d train %.2f metatest %.2f zeroshot %.2f", iteration, row["mean_train_return"],
                     row["mean_test_return_metatest"], row["mean_test_return_zeroshot"])

    evaluate_row(0, {})
    for it in range(1, config.iterations + 1):
        collect_rollouts(agent, buffer, collect_rng)
        sums: dict[str, float] = {}
        n = 0
        for _ in range(config.steps_per_iteration):
            losses = train_step(agent, buffer, train_rng)
            if losses is None:
                continue
            n += 1
            for k, v in losses.items():
                sums[k] = sums.get(k, 0.0) + v
        means = {k: v / n for k, v in sums.items()} if n else {}
        if it == 1 or it % config.eval_every == 0 or it == config.iterations:
            evaluate_row(it, means)

    digest = None
    if write:
        try:
            write_metrics(metrics, out / "metrics.csv")
            digest = save_checkpoint(agent, out / "checkpoint.json")
        except OSError as exc:
            raise OSError(f"cannot write results to {out}: {exc}") from exc
    return RunResult(agent, buffer, metrics, digest)


def write_metrics(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([row["iteration"]] + [_fmt(row[c]) for c in METRIC_COLUMNS[1:]])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
