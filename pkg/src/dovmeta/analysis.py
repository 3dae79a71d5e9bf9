"""Embedding diagnostics: posterior dumps, 2-d PCA and per-DoV cluster purity."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .agent import Agent
from .envs import TaskInstance


class DegenerateDataError(ValueError):
    """Input points carry no variance to project."""


class InsufficientDataError(ValueError):
    """Too few tasks per label for a purity estimate."""


@dataclass
class EmbeddingRow:
    task_id: int
    combo: tuple
    block_means: list
    block_vars: list

    @property
    def flat_mean(self) -> np.ndarray:
        return np.concatenate(self.block_means) if self.block_means else np.zeros(0)

    def to_json(self) -> dict:
        return {"task_id": self.task_id, "combo": list(self.combo),
                "block_means": [m.tolist() for m in self.block_means],
                "block_vars": [v.tolist() for v in self.block_vars],
                "flat_mean": self.flat_mean.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> "EmbeddingRow":
        return cls(int(data["task_id"]), tuple(data["combo"]),
                   [np.array(m, dtype=np.float64) for m in data["block_means"]],
                   [np.array(v, dtype=np.float64) for v in data["block_vars"]])


@dataclass
class EmbeddingDump:
    rows: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def block(self, j: int) -> np.ndarray:
        return np.stack([r.block_means[j] for r in self.rows])

    def write_jsonl(self, path) -> None:
        try:
            with open(path, "w") as fh:
                for row in self.rows:
                    fh.write(json.dumps(row.to_json(), sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"cannot write embedding dump {path}: {exc}") from exc

    @classmethod
    def read_jsonl(cls, path) -> "EmbeddingDump":
        try:
            lines = Path(path).read_text().splitlines()
        except OSError as exc:
            raise OSError(f"cannot read embedding dump {path}: {exc}") from exc
        return cls([EmbeddingRow.from_json(json.loads(line)) for line in lines if line.strip()])


def dump_embeddings(agent: Agent, tasks: Sequence[TaskInstance], rng: np.random.Generator,
                    contexts: np.ndarray | None = None, n_episodes: int = 2) -> EmbeddingDump:
    """Posterior per task from ``contexts`` or, by default, from fresh probe rollouts."""
    from .zeroshot import probe_contexts

    tasks = list(tasks)
    if contexts is None:
        contexts = probe_contexts(agent, tasks, n_episodes, rng)
    means, variances = agent.infer(contexts)
    rows = [EmbeddingRow(t.task_id, tuple(t.combo), [m[i].copy() for m in means], [v[i].copy() for v in variances])
            for i, t in enumerate(tasks)]
    return EmbeddingDump(rows)


# PCA

def _top_eigenpair(cov: np.ndarray, basis: list, max_iter: int, tol: float):
    """Dominant eigenpair of ``cov`` restricted to the complement of ``basis``."""
    d = cov.shape[0]
    scale = max(float(np.trace(cov)), 1e-300)

    def project(v):
        for b in basis:
            v = v - (b @ v) * b
        return v

    v = None
    for k in range(d):
        start = project(np.eye(d)[k])
        if np.linalg.norm(cov @ start) > 1e-12 * scale:
            v = start / np.linalg.norm(start)
            break
    if v is None:
        return 0.0, project(np.eye(d)[len(basis) % d])
    lam = float(v @ cov @ v)
    for _ in range(max_iter):
        w = project(cov @ v)
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
        new = float(v @ cov @ v)
        converged = abs(new - lam) < tol * max(abs(new), 1e-300)
        lam = new
        if converged:
            break
    return lam, v


def pca2d(points, max_iter: int = 500, tol: float = 1e-10):
    """Project onto the top-2 principal directions found by power iteration with deflation.

    Returns ``(projections (n, 2), explained_variance_fractions (2,), directions (2, d))``.
    """
    X = np.asarray(points, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError("pca2d needs at least 3 points of dimension >= 2")
    centered = X - X.mean(axis=0)
    cov = centered.T @ centered / (X.shape[0] - 1)
    total = float(np.trace(cov))
    if total <= 1e-300 or np.allclose(centered, 0.0):
        raise DegenerateDataError("all points are identical")
    directions, values = [], []
    for _ in range(2):
        lam, v = _top_eigenpair(cov, directions, max_iter, tol)
        v = v / np.linalg.norm(v)
        directions.append(v)
        values.append(max(lam, 0.0))
    W = np.stack(directions)
    frac = np.clip(np.array(values) / total, 0.0, 1.0)
    return centered @ W.T, frac, W


# cluster purity

def _mean_pairwise(points: np.ndarray, same: np.ndarray, pick_same: bool) -> float:
    diff = points[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=-1))
    iu = np.triu_indices(len(points), k=1)
    mask = same[iu] if pick_same else ~same[iu]
    return float(dist[iu][mask].mean())


def purity_ratio(points, labels) -> float:
    """Mean within-label over mean across-label pairwise Euclidean distance."""
    points = np.asarray(points, dtype=np.float64)
    labels = [json.dumps(y) if isinstance(y, (list, tuple)) else y for y in labels]
    counts: dict = {}
    for y in labels:
        counts[y] = counts.get(y, 0) + 1
    if sum(1 for c in counts.values() if c >= 2) < 2:
        raise InsufficientDataError("need at least 2 labels with at least 2 tasks each")
    arr = np.array(labels, dtype=object)
    same = arr[:, None] == arr[None, :]
    across = _mean_pairwise(points, same, pick_same=False)
    if across == 0.0:
        raise DegenerateDataError("all embeddings coincide across labels")
    return _mean_pairwise(points, same, pick_same=True) / across


def cluster_purity(dump: EmbeddingDump, j: int, block: int | None = None,
                   dims: slice | None = None) -> float:
    """Purity of DoV ``j`` labels measured on block ``block`` (default ``j``).

    ``dims`` restricts the block to a slice of coordinates, e.g. the first
    ``d`` dimensions of an undivided encoder for a like-for-like comparison.
    """
    if not dump.rows:
        raise InsufficientDataError("empty embedding dump")
    pts = dump.block(j if block is None else block)
    if dims is not None:
        pts = pts[:, dims]
    return purity_ratio(pts, [r.combo[j] for r in dump.rows])


# SVG scatter for inspection

_PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
            "#bcbd22", "#17becf"]


def write_svg(points, labels, path, size: int = 400, title: str = "") -> None:
    pts = np.asarray(points, dtype=np.float64)
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    xy = 20 + (pts - lo) / span * (size - 40)
    keys = sorted({str(y) for y in labels})
    colors = {k: _PALETTE[i % len(_PALETTE)] for i, k in enumerate(keys)}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
             f'<text x="10" y="14" font-size="12">{title}</text>']
    for (x, y), lab in zip(xy, labels):
        parts.append(f'<circle cx="{x:.2f}" cy="{size - y:.2f}" r="4" fill="{colors[str(lab)]}">'
                     f'<title>{lab}</title></circle>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
