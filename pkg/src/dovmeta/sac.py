"""Embedding-conditioned soft actor-critic with twin critics.

Losses return their value together with the gradients the trainer needs; the
critic loss also returns dL/dz so the encoder can be trained through it,
while the actor loss treats the embedding as a constant input.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import Mlp, ShapeError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)


@dataclass
class SacHyper:
    gamma: float = 0.99
    soft_update_rate: float = 0.005
    entropy_coef: float = 0.2
    batch_size: int = 256
    lr_encoder: float = 3e-4
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    reward_scale: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.soft_update_rate <= 1.0:
            raise ValueError("soft_update_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class Batch:
    """RL batch rows; ``z`` holds the embedding row used for each transition."""

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


def _log1m_tanh_sq(u):
    # log(1 - tanh(u)^2), stable for large |u|
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


class Actor:
    """Squashed-Gaussian policy over ``[-1, 1]^act_dim`` given ``state ⊕ z``."""

    def __init__(self, obs_dim: int, act_dim: int, emb_dim: int,
                 hidden: Sequence[int] = (64, 64), rng: np.random.Generator | None = None):
        self.obs_dim, self.act_dim, self.emb_dim = obs_dim, act_dim, emb_dim
        self.net = Mlp((obs_dim + emb_dim, *hidden, 2 * act_dim), rng)

    def _inputs(self, state, z):
        state = np.atleast_2d(np.asarray(state, dtype=np.float64))
        z = np.asarray(z, dtype=np.float64)
        if z.ndim == 1:
            z = np.broadcast_to(z, (state.shape[0], z.shape[0]))
        if state.shape[-1] != self.obs_dim or z.shape[-1] != self.emb_dim:
            raise ShapeError(f"actor expects state {self.obs_dim} and embedding {self.emb_dim} dims, "
                             f"got {state.shape[-1]} and {z.shape[-1]}")
        return np.concatenate([state, z], axis=-1)

    def dist(self, state, z):
        out, cache = self.net.forward(self._inputs(state, z))
        mean, raw = out[:, :self.act_dim], out[:, self.act_dim:]
        log_std = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
        mask = (raw >= LOG_STD_MIN) & (raw <= LOG_STD_MAX)
        return mean, log_std, mask, cache

    def sample(self, state, z, noise):
        """Reparameterized squashed sample; returns ``(action, log_prob, saved)``."""
        mean, log_std, mask, cache = self.dist(state, z)
        std = np.exp(log_std)
        u = mean + std * noise
        action = np.tanh(u)
        log_prob = np.sum(-0.5 * noise * noise - log_std - _HALF_LOG_2PI - _log1m_tanh_sq(u), axis=-1)
        return action, log_prob, (noise, std, u, action, mask, cache)

    def backward(self, saved, d_action, d_log_prob):
        """Parameter gradients from dL/d(action) and dL/d(log_prob) per row."""
        noise, std, u, action, mask, cache = saved
        d_u = d_action * (1.0 - action * action) + d_log_prob[:, None] * 2.0 * action
        d_mean = d_u
        d_log_std = (d_u * std * noise - d_log_prob[:, None]) * mask
        grads, _ = self.net.backward(cache, np.concatenate([d_mean, d_log_std], axis=-1))
        return grads


def squashed_log_prob(mean, log_std, action):
    """Log-density of ``tanh(N(mean, exp(log_std)^2))`` at ``action`` in (-1, 1)."""
    u = np.arctanh(action)
    std = np.exp(log_std)
    eps = (u - mean) / std
    return np.sum(-0.5 * eps * eps - log_std - _HALF_LOG_2PI - _log1m_tanh_sq(u), axis=-1)


def act(actor: Actor, state, z, deterministic: bool = True, rng: np.random.Generator | None = None):
    single = np.asarray(state).ndim == 1
    mean, log_std, _, _ = actor.dist(state, z)
    if deterministic:
        action = np.tanh(mean)
    else:
        action = np.tanh(mean + np.exp(log_std) * rng.standard_normal(mean.shape))
    return action[0] if single else action


class CriticPair:
    def __init__(self, obs_dim: int, act_dim: int, emb_dim: int,
                 hidden: Sequence[int] = (64, 64), rng: np.random.Generator | None = None):
        self.obs_dim, self.act_dim, self.emb_dim = obs_dim, act_dim, emb_dim
        sizes = (obs_dim + act_dim + emb_dim, *hidden, 1)
        self.q = [Mlp(sizes, rng), Mlp(sizes, rng)]
        self.target = [net.copy() for net in self.q]

    def params(self) -> list[np.ndarray]:
        return self.q[0].params + self.q[1].params

    def soft_update(self, rate: float) -> None:
        for main, tgt in zip(self.q, self.target):
            for pm, pt in zip(main.params, tgt.params):
                pt *= 1.0 - rate
                pt += rate * pm


def soft_update(critics: CriticPair, rate: float) -> None:
    critics.soft_update(rate)


def bellman_targets(critics: CriticPair, actor: Actor, batch: Batch, z_target, hyper: SacHyper, next_noise):
    """Soft Bellman backup using the target critics and a fresh next action."""
    next_a, next_logp, _ = actor.sample(batch.next_obs, z_target, next_noise)
    tgt_in = np.concatenate([batch.next_obs, next_a, z_target], axis=-1)
    q_next = np.minimum(critics.target[0](tgt_in)[:, 0], critics.target[1](tgt_in)[:, 0])
    soft_v = q_next - hyper.entropy_coef * next_logp
    return hyper.reward_scale * batch.rewards + hyper.gamma * (1.0 - batch.terminals) * soft_v


def critic_loss(critics: CriticPair, actor: Actor, batch: Batch, z, z_target, hyper: SacHyper, next_noise,
                targets=None):
    """Twin-Q squared Bellman residual, mean over rows.

    ``z`` carries gradient (returned as ``d_z`` per row); ``z_target`` is the
    detached embedding used for the bootstrap target, which is a constant for
    differentiation. Precomputed ``targets`` skip the backup. Returns
    ``(loss, critic_param_grads, d_z, info)``.
    """
    n = len(batch)
    y = bellman_targets(critics, actor, batch, z_target, hyper, next_noise) if targets is None else targets

    q_in = np.concatenate([batch.obs, batch.actions, z], axis=-1)
    loss = 0.0
    grads = []
    d_in_total = np.zeros_like(q_in)
    for net in critics.q:
        q, cache = net.forward(q_in)
        err = q[:, 0] - y
        loss += float(np.mean(err * err))
        g, d_in = net.backward(cache, (2.0 / n) * err[:, None])
        grads.extend(g)
        d_in_total += d_in
    d_z = d_in_total[:, critics.obs_dim + critics.act_dim:]
    return loss, grads, d_z, {"targets": y}


def actor_loss(actor: Actor, critics: CriticPair, batch: Batch, z_detached, hyper: SacHyper, noise):
    """Mean of ``entropy_coef * log_prob - min_k Q_k`` over rows; returns ``(loss, actor_grads)``."""
    n = len(batch)
    action, log_prob, saved = actor.sample(batch.obs, z_detached, noise)
    q_in = np.concatenate([batch.obs, action, z_detached], axis=-1)
    q1, c1 = critics.q[0].forward(q_in)
    q2, c2 = critics.q[1].forward(q_in)
    use_first = q1[:, 0] <= q2[:, 0]
    q_min = np.where(use_first, q1[:, 0], q2[:, 0])
    loss = float(np.mean(hyper.entropy_coef * log_prob - q_min))

    g_q = -1.0 / n
    _, d_in1 = critics.q[0].backward(c1, (g_q * use_first)[:, None], need_param_grads=False)
    _, d_in2 = critics.q[1].backward(c2, (g_q * ~use_first)[:, None], need_param_grads=False)
    a0, a1 = critics.obs_dim, critics.obs_dim + critics.act_dim
    d_action = d_in1[:, a0:a1] + d_in2[:, a0:a1]
    d_log_prob = np.full(n, hyper.entropy_coef / n)
    grads = actor.backward(saved, d_action, d_log_prob)
    return loss, grads, {"log_prob": float(np.mean(log_prob)), "q": float(np.mean(q_min))}
