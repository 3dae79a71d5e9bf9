"""Small deterministic differentiable kernel.

Everything here is float64 numpy. MLPs are fixed-topology ReLU networks with
a hand-written backward pass; there is no tape or graph. Callers keep the
cache returned by ``Mlp.forward`` and hand it back to ``Mlp.backward``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

LOG_VAR_MIN = -10.0
LOG_VAR_MAX = 6.0
VAR_MIN = float(np.exp(LOG_VAR_MIN))
VAR_MAX = float(np.exp(LOG_VAR_MAX))


class ShapeError(ValueError):
    """Raised when array shapes do not line up."""


class DomainError(ValueError):
    """Raised when a value lies outside the domain of an operation."""


def make_rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


class Mlp:
    """ReLU multilayer perceptron with an affine output layer.

    ``params`` is a flat list ``[W0, b0, W1, b1, ...]`` with ``W`` of shape
    ``(fan_in, fan_out)``; optimizers and checkpoints operate on that list.
    """

    def __init__(self, layer_sizes: Sequence[int], rng: np.random.Generator | None = None):
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or any(s <= 0 for s in sizes):
            raise ShapeError(f"invalid layer sizes {layer_sizes}")
        self.layer_sizes = tuple(sizes)
        rng = make_rng(0) if rng is None else rng
        self.params: list[np.ndarray] = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            self.params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "Mlp":
        other = Mlp.__new__(Mlp)
        other.layer_sizes = self.layer_sizes
        other.params = [p.copy() for p in self.params]
        return other

    def forward(self, x: np.ndarray):
        """Return ``(output, cache)``. Accepts a vector or a batch of rows."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise ShapeError(f"expected input dim {self.in_dim}, got {x.shape[-1]}")
        squeeze = x.ndim == 1
        h = x[None, :] if squeeze else x
        inputs = []
        for layer in range(self.n_layers):
            W, b = self.params[2 * layer], self.params[2 * layer + 1]
            inputs.append(h)
            h = h @ W + b
            if layer < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        out = h[0] if squeeze else h
        return out, (inputs, squeeze)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, cache, output_grad: np.ndarray, need_param_grads: bool = True):
        """Backpropagate ``output_grad``; returns ``(param_grads, input_grad)``.

        With ``need_param_grads=False`` the parameter gradients are ``None``;
        used when only the input gradient is needed (e.g. dQ/da).
        """
        inputs, squeeze = cache
        g = np.asarray(output_grad, dtype=np.float64)
        if g.shape[-1] != self.out_dim:
            raise ShapeError(f"expected output grad dim {self.out_dim}, got {g.shape[-1]}")
        if squeeze:
            g = g[None, :]
        if g.shape[0] != inputs[0].shape[0]:
            raise ShapeError("output grad batch does not match cached forward pass")
        grads: list[np.ndarray | None] = [None] * len(self.params)
        for layer in reversed(range(self.n_layers)):
            W = self.params[2 * layer]
            h_in = inputs[layer]
            if need_param_grads:
                grads[2 * layer] = h_in.T @ g
                grads[2 * layer + 1] = g.sum(axis=0)
            g = g @ W.T
            if layer > 0:
                # relu'(0) := 0; h_in is the post-activation of the previous layer
                g = g * (h_in > 0.0)
        input_grad = g[0] if squeeze else g
        return (grads if need_param_grads else None), input_grad


def mlp_forward(net: Mlp, x: np.ndarray) -> np.ndarray:
    return net.forward(x)[0]


def mlp_backward(net: Mlp, x: np.ndarray, output_grad: np.ndarray):
    _, cache = net.forward(x)
    return net.backward(cache, output_grad)


class Adam:
    """Adam with bias correction, updating a list of arrays in place."""

    def __init__(self, params: list[np.ndarray], lr: float = 3e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads: Sequence[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ShapeError("gradient list length does not match parameter list")
        for p, g in zip(self.params, grads):
            if p.shape != np.shape(g):
                raise ShapeError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> list[np.ndarray]:
        return self.m + self.v

    def load_state(self, arrays: Sequence[np.ndarray], t: int) -> None:
        if len(arrays) != 2 * len(self.params):
            raise ShapeError("optimizer state length mismatch")
        for dst, src in zip(self.m + self.v, arrays):
            dst[...] = src
        self.t = int(t)


@dataclass
class DiagGaussian:
    mean: np.ndarray
    var: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ShapeError(f"mean {self.mean.shape} and variance {self.var.shape} differ")
        if not np.all(self.var > 0.0):
            raise DomainError("variance entries must be strictly positive")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @classmethod
    def standard(cls, dim: int) -> "DiagGaussian":
        return cls(np.zeros(dim), np.ones(dim))

    def copy(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.copy(), self.var.copy())


def kl_terms(mu_q, var_q, mu_p, var_p):
    """Elementwise-summed KL(q || p) for diagonal Gaussians over the last axis.

    Returns ``(kl, dkl/dmu_q, dkl/dvar_q)``. Arrays broadcast, so a batch of
    posteriors can be scored against one target.
    """
    diff = mu_p - mu_q
    kl = 0.5 * np.sum(var_q / var_p + diff * diff / var_p - 1.0 + np.log(var_p) - np.log(var_q), axis=-1)
    d_mu = -diff / var_p
    d_var = 0.5 * (1.0 / var_p - 1.0 / var_q)
    return kl, d_mu, d_var


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> float:
    if q.mean.shape != p.mean.shape:
        raise ShapeError(f"dimension mismatch {q.mean.shape} vs {p.mean.shape}")
    if not (np.all(q.var > 0) and np.all(p.var > 0)):
        raise DomainError("variances must be positive")
    kl = float(kl_terms(q.mean, q.var, p.mean, p.var)[0])
    return max(kl, 0.0)


def gaussian_sample(g: DiagGaussian, rng: np.random.Generator, noise: np.ndarray | None = None) -> np.ndarray:
    """Reparameterized draw ``mean + sqrt(var) * eps``; pass ``noise`` to freeze eps."""
    eps = rng.standard_normal(g.mean.shape) if noise is None else np.asarray(noise, dtype=np.float64)
    return g.mean + np.sqrt(g.var) * eps


def clamp_log_var(log_var: np.ndarray):
    """Exponentiate a log-variance head with clamping; returns ``(var, dvar/dlog_var)``."""
    inside = (log_var >= LOG_VAR_MIN) & (log_var <= LOG_VAR_MAX)
    var = np.exp(np.clip(log_var, LOG_VAR_MIN, LOG_VAR_MAX))
    return var, var * inside
