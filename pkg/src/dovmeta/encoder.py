"""Per-DoV context encoders.

Each encoder maps a single transition ``(s, a, s', r)`` to a Gaussian factor
(mean, log-variance). A task posterior is the normalized product of all
factors in its context together with the unit prior, so an empty context gives
exactly N(0, I) and the result does not depend on transition order.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import DiagGaussian, Mlp, clamp_log_var, kl_terms


@dataclass
class ContextBatch:
    """Transitions from one task, stored column-wise."""

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray
    rewards: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def empty(cls, obs_dim: int, act_dim: int) -> "ContextBatch":
        return cls(np.zeros((0, obs_dim)), np.zeros((0, act_dim)), np.zeros((0, obs_dim)), np.zeros(0))

    def flat(self) -> np.ndarray:
        return flatten_transitions(self.states, self.actions, self.next_states, self.rewards)


def flatten_transitions(states, actions, next_states, rewards) -> np.ndarray:
    rewards = np.asarray(rewards, dtype=np.float64)
    return np.concatenate([states, actions, next_states, rewards[..., None]], axis=-1)


def transition_dim(obs_dim: int, act_dim: int) -> int:
    return 2 * obs_dim + act_dim + 1


def product_of_gaussians(means, variances, include_prior: bool = True):
    """Precision-weighted product over the factor axis (second to last).

    ``means``/``variances`` have shape ``(..., N, d)``. Returns ``(mean, var)``
    of shape ``(..., d)``; with ``include_prior`` a N(0, I) factor joins.
    """
    means = np.asarray(means, dtype=np.float64)
    precisions = 1.0 / np.asarray(variances, dtype=np.float64)
    total = precisions.sum(axis=-2)
    if include_prior:
        total = total + 1.0
    mean = (precisions * means).sum(axis=-2) / total
    return mean, 1.0 / total


@dataclass
class TaskEmbedding:
    blocks: list[np.ndarray]

    @property
    def flat(self) -> np.ndarray:
        if not self.blocks:
            return np.zeros(0)
        return np.concatenate(self.blocks, axis=-1)

    def __len__(self) -> int:
        return len(self.blocks)


class DovEncoder:
    """M independent encoders, one latent block of size ``latent_dim`` each."""

    def __init__(self, num_dovs: int, in_dim: int, latent_dim: int,
                 hidden: Sequence[int] = (64, 64), rng: np.random.Generator | None = None):
        self.num_dovs = int(num_dovs)
        self.in_dim = int(in_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = tuple(hidden)
        self.nets = [Mlp((in_dim, *hidden, 2 * latent_dim), rng) for _ in range(num_dovs)]

    @property
    def embedding_dim(self) -> int:
        return self.num_dovs * self.latent_dim

    def factors(self, j: int, rows: np.ndarray):
        """Factor means/variances for transition rows of shape ``(..., in_dim)``."""
        lead = rows.shape[:-1]
        out, cache = self.nets[j].forward(rows.reshape(-1, self.in_dim))
        d = self.latent_dim
        mu = out[:, :d].reshape(*lead, d)
        var, dvar_dlv = clamp_log_var(out[:, d:])
        return mu, var.reshape(*lead, d), dvar_dlv.reshape(*lead, d), cache

    def posterior(self, j: int, ctx) -> DiagGaussian:
        rows = ctx.flat() if isinstance(ctx, ContextBatch) else np.asarray(ctx, dtype=np.float64)
        if len(rows) == 0:
            return DiagGaussian.standard(self.latent_dim)
        mu_t, var_t, _, _ = self.factors(j, rows)
        mean, var = product_of_gaussians(mu_t, var_t)
        return DiagGaussian(mean, var)

    def posteriors(self, ctx) -> list[DiagGaussian]:
        return [self.posterior(j, ctx) for j in range(self.num_dovs)]

    # batched path used by training: contexts of shape (T, N, in_dim)

    def encode(self, contexts: np.ndarray) -> "EncodeResult":
        contexts = np.asarray(contexts, dtype=np.float64)
        means, variances, saved = [], [], []
        for j in range(self.num_dovs):
            mu_t, var_t, dvar_dlv, cache = self.factors(j, contexts)
            precision = 1.0 / var_t
            total = precision.sum(axis=-2) + 1.0
            mean = (precision * mu_t).sum(axis=-2) / total
            means.append(mean)
            variances.append(1.0 / total)
            saved.append((mu_t, precision, dvar_dlv, total, mean, cache))
        return EncodeResult(means, variances, saved)

    def backward(self, result: "EncodeResult", d_means, d_vars) -> list[list[np.ndarray]]:
        """Gradients of each encoder's parameters given dL/d(posterior mean, var)."""
        grads = []
        for j in range(self.num_dovs):
            mu_t, precision, dvar_dlv, total, mean, cache = result.saved[j]
            gm = d_means[j][..., None, :]
            gv = d_vars[j][..., None, :]
            P = total[..., None, :]
            d_mu_t = gm * precision / P
            # d(post)/d(precision_t), then chain through var_t = 1/precision_t
            d_prec = gm * (mu_t - mean[..., None, :]) / P - gv / (P * P)
            d_var_t = -d_prec * precision * precision
            d_lv = d_var_t * dvar_dlv
            out_grad = np.concatenate([d_mu_t, d_lv], axis=-1).reshape(-1, 2 * self.latent_dim)
            g, _ = self.nets[j].backward(cache, out_grad)
            grads.append(g)
        return grads

    def params(self) -> list[np.ndarray]:
        return [p for net in self.nets for p in net.params]


@dataclass
class EncodeResult:
    means: list[np.ndarray]
    variances: list[np.ndarray]
    saved: list


def sample_task_embedding(encoder: DovEncoder, ctx, rng: np.random.Generator):
    """Reparameterized sample of every block; returns ``(TaskEmbedding, posteriors)``."""
    posts = encoder.posteriors(ctx)
    blocks = [p.mean + np.sqrt(p.var) * rng.standard_normal(p.mean.shape) for p in posts]
    return TaskEmbedding(blocks), posts


def prior_kl(posteriors: Sequence[DiagGaussian]) -> float:
    total = 0.0
    for q in posteriors:
        total += float(kl_terms(q.mean, q.var, 0.0, 1.0)[0])
    return total
