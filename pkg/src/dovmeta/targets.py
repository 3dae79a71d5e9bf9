"""EMA target distributions per (DoV, label) and the disentanglement loss."""
from __future__ import annotations

from typing import Hashable, Sequence

import numpy as np

from .numerics import DiagGaussian, kl_terms


class MissingLabelError(KeyError):
    """No target exists for a (DoV, label) pair; the label was never trained on."""

    def __init__(self, dov: int, label):
        super().__init__(f"no EMA target for DoV {dov} label {label!r}")
        self.dov = dov
        self.label = label


class TargetTable:
    """Map ``(dov_index, label) -> (mean, var)`` maintained by exponential moving average.

    Entries initialize to the first posterior they see. The table holds plain
    arrays and is never differentiated through.
    """

    def __init__(self, tau: float = 0.99):
        if not 0.0 <= tau < 1.0:
            raise ValueError(f"tau must lie in [0, 1), got {tau}")
        self.tau = float(tau)
        self.entries: dict[tuple[int, Hashable], tuple[np.ndarray, np.ndarray]] = {}

    def __contains__(self, key) -> bool:
        return key in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def ema_update(self, j: int, y, posterior: DiagGaussian) -> None:
        key = (j, y)
        mean = np.array(posterior.mean, dtype=np.float64)
        var = np.array(posterior.var, dtype=np.float64)
        if key not in self.entries:
            self.entries[key] = (mean, var)
            return
        old_mean, old_var = self.entries[key]
        tau = self.tau
        self.entries[key] = (tau * old_mean + (1.0 - tau) * mean, tau * old_var + (1.0 - tau) * var)

    def get_target(self, j: int, y) -> DiagGaussian:
        try:
            mean, var = self.entries[(j, y)]
        except KeyError:
            raise MissingLabelError(j, y) from None
        return DiagGaussian(mean.copy(), var.copy())

    def labels(self, j: int) -> list:
        return sorted(y for (jj, y) in self.entries if jj == j)

    def copy(self) -> "TargetTable":
        other = TargetTable(self.tau)
        other.entries = {k: (m.copy(), v.copy()) for k, (m, v) in self.entries.items()}
        return other

    def to_records(self) -> list[dict]:
        return [
            {"dov": j, "label": _label_to_json(y), "mean": m.tolist(), "var": v.tolist()}
            for (j, y), (m, v) in sorted(self.entries.items(), key=lambda kv: (kv[0][0], repr(kv[0][1])))
        ]

    @classmethod
    def from_records(cls, tau: float, records: Sequence[dict]) -> "TargetTable":
        table = cls(tau)
        for rec in records:
            key = (int(rec["dov"]), _label_from_json(rec["label"]))
            table.entries[key] = (np.array(rec["mean"], dtype=np.float64), np.array(rec["var"], dtype=np.float64))
        return table


def _label_to_json(y):
    return list(y) if isinstance(y, tuple) else y


def _label_from_json(y):
    return tuple(y) if isinstance(y, list) else y


def disentangle_loss(table: TargetTable, labels: Sequence, posteriors: Sequence[DiagGaussian],
                     lam: float, with_grad: bool = False):
    """``lam * sum_j KL(posterior_j || target_{j, labels[j]})``.

    Pairs without a target contribute zero (they are about to be initialized
    from this very posterior). With ``with_grad`` also returns per-block
    gradients w.r.t. posterior mean and variance; targets are constants.
    """
    total = 0.0
    d_means, d_vars = [], []
    for j, (y, q) in enumerate(zip(labels, posteriors)):
        if (j, y) not in table or lam == 0.0:
            d_means.append(np.zeros_like(q.mean))
            d_vars.append(np.zeros_like(q.var))
            continue
        t_mean, t_var = table.entries[(j, y)]
        kl, dm, dv = kl_terms(q.mean, q.var, t_mean, t_var)
        total += float(kl)
        d_means.append(lam * dm)
        d_vars.append(lam * dv)
    loss = lam * total
    if with_grad:
        return loss, d_means, d_vars
    return loss
