"""Zero-shot composition of task embeddings and the evaluation protocols.

Methods
-------
zeroshot_s1      concatenate EMA target means of the task's (seen) labels
zeroshot_s2      probe one task bearing an unseen label, reuse its block for
                 every other task with that label, fill the rest from targets
prior            condition on the prior mean (zero vector)
metatest_pearl / metatest_ours
                 probe each test task for several episodes first (not zero-shot)
sac              embedding-free multi-task policy
mean_compose     like S1 but each block averages training-task posterior means
"""
from __future__ import annotations

import csv
import json
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .agent import Agent, run_episodes, sample_rows
from .encoder import TaskEmbedding
from .envs import TaskInstance
from .numerics import DiagGaussian
from .targets import MissingLabelError, TargetTable

METHODS = ("zeroshot_s1", "zeroshot_s2", "prior", "metatest_pearl", "metatest_ours", "sac",
           "mean_compose", "mean_compose_ablation")

__all__ = ["MissingLabelError", "UnsupportedCompositionError", "EvalReport", "compose_s1", "compose_s2",
           "infer_unseen_label_s2", "evaluate", "METHODS"]


class UnsupportedCompositionError(ValueError):
    """More than one DoV label of a task is unseen."""


@dataclass
class EvalReport:
    method: str
    task_ids: list
    combos: list
    returns: list
    episodes: int
    probe_task: list = field(default_factory=list)
    pre_eval_interactions: dict = field(default_factory=dict)

    @property
    def mean(self) -> float:
        return float(np.mean(self.returns)) if self.returns else float("nan")

    @property
    def stderr(self) -> float:
        n = len(self.returns)
        if n < 2:
            return 0.0
        return float(np.std(self.returns, ddof=1) / np.sqrt(n))

    def rows(self) -> list[dict]:
        out = []
        for k, (tid, combo, ret) in enumerate(zip(self.task_ids, self.combos, self.returns)):
            row = {"method": self.method, "task_id": tid, "combo": list(combo),
                   "mean_return": float(ret), "episodes": self.episodes}
            if self.probe_task:
                row["probe_task"] = self.probe_task[k]
            out.append(row)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            header = ["method", "task_id", "combo", "mean_return", "episodes"]
            if self.probe_task:
                header.append("probe_task")
            writer.writerow(header)
            for row in self.rows():
                values = [row["method"], row["task_id"], "-".join(map(str, row["combo"])),
                          repr(row["mean_return"]), row["episodes"]]
                if self.probe_task:
                    values.append(row["probe_task"])
                writer.writerow(values)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows():
                fh.write(json.dumps(row, sort_keys=True) + "\n")
            summary = {"method": self.method, "aggregate_mean": self.mean, "aggregate_stderr": self.stderr,
                       "n_tasks": len(self.returns)}
            fh.write(json.dumps(summary, sort_keys=True) + "\n")


def _report(method, tasks, returns, E, **extra) -> EvalReport:
    return EvalReport(method, [t.task_id for t in tasks], [t.combo for t in tasks],
                      [float(r) for r in returns], E, **extra)


# composition

def compose_s1(table: TargetTable, labels: Sequence, sample: bool = False,
               rng: np.random.Generator | None = None) -> TaskEmbedding:
    """Block ``j`` is the EMA target mean of label ``labels[j]`` (a draw with ``sample``)."""
    blocks = []
    for j, y in enumerate(labels):
        target = table.get_target(j, y)
        blocks.append(target.mean + np.sqrt(target.var) * rng.standard_normal(target.dim) if sample else target.mean)
    return TaskEmbedding(blocks)


def compose_s2(table: TargetTable, inferred: DiagGaussian, labels: Sequence, j_unseen: int) -> TaskEmbedding:
    blocks = []
    for j, y in enumerate(labels):
        if j == j_unseen:
            blocks.append(np.array(inferred.mean))
            continue
        try:
            blocks.append(table.get_target(j, y).mean)
        except MissingLabelError:
            raise UnsupportedCompositionError(
                f"labels {tuple(labels)} have unseen entries besides DoV {j_unseen}; "
                "only one unseen DoV can be composed") from None
    return TaskEmbedding(blocks)


def mean_compose(agent: Agent, labels: Sequence) -> TaskEmbedding:
    """Average the last training posterior means of tasks sharing each label."""
    blocks = []
    for j, y in enumerate(labels):
        means = [agent.train_posterior_means[t.task_id][j] for t in agent.train_tasks
                 if agent.block_labels(t)[j] == y and t.task_id in agent.train_posterior_means]
        if not means:
            raise MissingLabelError(j, y)
        blocks.append(np.mean(means, axis=0))
    return TaskEmbedding(blocks)


# rollouts

def run_eval_episodes(agent: Agent, tasks: Sequence[TaskInstance], z: np.ndarray, E: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Mean deterministic return per task over ``E`` episodes.

    ``z`` is ``(T, dim)`` (shared by a task's episodes) or ``(T, E, dim)``.
    """
    tasks = list(tasks)
    T = len(tasks)
    z = np.asarray(z, dtype=np.float64)
    lanes_z = z.reshape(T * E, -1) if z.ndim == 3 else np.repeat(z, E, axis=0)
    lanes = [t for t in tasks for _ in range(E)]
    jobs = max(1, min(agent.config.jobs, T))
    if jobs == 1:
        returns = run_episodes(agent, lanes, lanes_z, True, rng).returns
    else:
        bounds = np.linspace(0, T, jobs + 1).astype(int) * E
        child = rng.spawn(jobs)
        with ThreadPoolExecutor(jobs) as pool:
            parts = pool.map(lambda k: run_episodes(agent, lanes[bounds[k]:bounds[k + 1]],
                                                    lanes_z[bounds[k]:bounds[k + 1]], True, child[k]).returns,
                             range(jobs))
            returns = np.concatenate(list(parts))
    return returns.reshape(T, E).mean(axis=1)


def probe_contexts(agent: Agent, tasks: Sequence[TaskInstance], n_episodes: int, rng: np.random.Generator,
                   interactions: Counter | None = None) -> np.ndarray:
    """PEARL-style online probing; returns ``(T, N, in_dim)`` contexts.

    Each episode conditions on a posterior sample given everything gathered
    so far (prior for the first); the context after an episode is ``N``
    transitions drawn uniformly from all probe transitions.
    """
    N = agent.config.context_size
    T = len(tasks)
    gathered = np.zeros((T, 0, agent.in_dim))
    context = agent.empty_contexts(T)
    for _ in range(n_episodes):
        z = agent.embed(context, rng, sample=True)
        eps = run_episodes(agent, tasks, z, deterministic=False, rng=rng, interactions=interactions)
        gathered = np.concatenate([gathered, eps.flat()], axis=1)
        context = sample_rows(gathered, N, rng)
    return context


def infer_unseen_label_s2(agent: Agent, probe_task: TaskInstance, j_unseen: int, rollout_budget: int,
                          rng: np.random.Generator, interactions: Counter | None = None) -> DiagGaussian:
    context = probe_contexts(agent, [probe_task], rollout_budget, rng, interactions)
    return agent.posteriors_of(context, 0)[j_unseen]


# protocols

def evaluate(agent: Agent, embeddings: np.ndarray, tasks: Sequence[TaskInstance], E: int,
             rng: np.random.Generator, method: str) -> EvalReport:
    returns = run_eval_episodes(agent, tasks, embeddings, E, rng)
    return _report(method, tasks, returns, E)


def evaluate_s1(agent: Agent, tasks, rng, E: int | None = None) -> EvalReport:
    E = agent.config.eval_episodes if E is None else E
    z = np.stack([compose_s1(agent.table, agent.block_labels(t), agent.config.sample_s1, rng).flat
                  for t in tasks])
    return evaluate(agent, z, tasks, E, rng, "zeroshot_s1")


def evaluate_mean_compose(agent: Agent, tasks, rng, E: int | None = None) -> EvalReport:
    E = agent.config.eval_episodes if E is None else E
    z = np.stack([mean_compose(agent, agent.block_labels(t)).flat for t in tasks])
    return evaluate(agent, z, tasks, E, rng, "mean_compose_ablation")


def evaluate_prior(agent: Agent, tasks, rng, E: int | None = None) -> EvalReport:
    E = agent.config.eval_episodes if E is None else E
    if agent.config.sample_prior:
        z = rng.standard_normal((len(tasks), E, agent.embedding_dim))
    else:
        z = np.zeros((len(tasks), agent.embedding_dim))
    return evaluate(agent, z, tasks, E, rng, "prior")


def evaluate_metatest(agent: Agent, tasks, rng, E: int | None = None, n_probe: int | None = None) -> EvalReport:
    cfg = agent.config
    E = cfg.eval_episodes if E is None else E
    n_probe = cfg.metatest_trajectories if n_probe is None else n_probe
    contexts = probe_contexts(agent, tasks, n_probe, rng)
    z = agent.embed(contexts, rng, sample=False)
    method = "metatest_pearl" if agent.kind == "pearl" else "metatest_ours"
    return evaluate(agent, z, tasks, E, rng, method)


def evaluate_sac(agent: Agent, tasks, rng, E: int | None = None) -> EvalReport:
    E = agent.config.eval_episodes if E is None else E
    return evaluate(agent, np.zeros((len(tasks), agent.embedding_dim)), tasks, E, rng, "sac")


def evaluate_s2(agent: Agent, tasks: Sequence[TaskInstance], j_unseen: int, rng, E: int | None = None,
                probe_ids: Sequence[int] | None = None, budget: int | None = None) -> EvalReport:
    """Each task in ``tasks`` (all sharing the unseen label) serves once as the probe.

    Rows cover the remaining tasks for each probe choice;
    ``pre_eval_interactions`` maps probe id to the env-step counter of its
    probing phase.
    """
    cfg = agent.config
    E = cfg.eval_episodes if E is None else E
    budget = cfg.rollout_budget if budget is None else budget
    tasks = list(tasks)
    unseen = {t.combo[j_unseen] for t in tasks}
    if len(unseen) != 1:
        raise ValueError("S2 tasks must share a single unseen label")
    probes = [t for t in tasks if probe_ids is None or t.task_id in set(probe_ids)]
    ids, combos, returns, probe_col = [], [], [], []
    accounting = {}
    for probe in probes:
        counter: Counter = Counter()
        inferred = infer_unseen_label_s2(agent, probe, j_unseen, budget, rng, counter)
        others = [t for t in tasks if t.task_id != probe.task_id]
        if not others:
            continue
        z = np.stack([compose_s2(agent.table, inferred, agent.block_labels(t), j_unseen).flat for t in others])
        rets = run_eval_episodes(agent, others, z, E, rng)
        accounting[probe.task_id] = dict(counter)
        for t, r in zip(others, rets):
            ids.append(t.task_id)
            combos.append(t.combo)
            returns.append(float(r))
            probe_col.append(probe.task_id)
    return EvalReport("zeroshot_s2", ids, combos, returns, E, probe_col, accounting)


def evaluate_method(agent: Agent, method: str, tasks, rng, **kwargs) -> EvalReport:
    if method == "zeroshot_s1":
        return evaluate_s1(agent, tasks, rng)
    if method == "prior":
        return evaluate_prior(agent, tasks, rng)
    if method in ("metatest_pearl", "metatest_ours"):
        report = evaluate_metatest(agent, tasks, rng)
        report.method = method
        return report
    if method == "sac":
        return evaluate_sac(agent, tasks, rng)
    if method in ("mean_compose", "mean_compose_ablation"):
        return evaluate_mean_compose(agent, tasks, rng)
    if method == "zeroshot_s2":
        return evaluate_s2(agent, tasks, kwargs["j_unseen"], rng, probe_ids=kwargs.get("probe_ids"))
    raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
