"""Divergences between prediction distributions and the consistency objectives.

All logs are natural and floored at 1e-12, so the Jensen-Shannon divergence
lies in ``[0, ln 2]``. Every function accepts plain arrays or
:class:`~deskmt.tensor.Tensor` inputs and returns a Tensor, which keeps the
same code path for scalar checks and for training.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .tensor import Tensor

DIVERGENCES = ("js", "kl")


@dataclass
class ConsistConfig:
    alpha: float = 7.0
    tau: float = 1.0
    divergence: str = "js"
    batch_reduction: str = "per-token-mean"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError(f"alpha must be non-negative, got {self.alpha}")
        if not self.tau > 0:
            raise ValueError(f"tau must be positive, got {self.tau}")
        if self.divergence not in DIVERGENCES:
            raise ValueError(f"divergence must be one of {DIVERGENCES}, got {self.divergence!r}")
        if self.batch_reduction != "per-token-mean":
            raise ValueError(f"unsupported batch_reduction {self.batch_reduction!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ConsistConfig":
        return cls(**d)


def _pair(p, q):
    p, q = T.as_tensor(p), T.as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"distribution shapes differ: {p.shape} vs {q.shape}")
    return p, q


def kl_rows(p, q) -> Tensor:
    """KL(p || q) along the last axis."""
    p, q = _pair(p, q)
    return T.sum(T.mul(p, T.add(T.log(p), T.neg(T.log(q)))), axis=-1)


def js_rows(p, q) -> Tensor:
    p, q = _pair(p, q)
    m = T.scale(T.add(p, q), 0.5)
    log_m = T.log(m)
    a = T.mul(p, T.add(T.log(p), T.neg(log_m)))
    b = T.mul(q, T.add(T.log(q), T.neg(log_m)))
    return T.scale(T.sum(T.add(a, b), axis=-1), 0.5)


def kl_divergence(p, q) -> Tensor:
    return T.sum(kl_rows(p, q))


def js_divergence(p, q) -> Tensor:
    return T.sum(js_rows(p, q))


def _masked_token_mean(rows: Tensor, mask) -> Tensor:
    m = np.asarray(mask, dtype=bool)
    if m.shape != rows.shape:
        raise ValueError(f"position count mismatch: mask {m.shape} vs distributions {rows.shape}")
    count = int(m.sum())
    if count == 0:
        return Tensor(0.0, dtype=rows.data.dtype)
    picked = T.mul(rows, Tensor(m, dtype=rows.data.dtype))
    return T.scale(T.sum(picked), 1.0 / count)


def consist_loss(child_dists, parent_dists, mask, cfg: ConsistConfig) -> Tensor:
    """Cross-model consistency: mean over unmasked positions of F[child_t, parent_t].

    ``parent_dists`` is treated as a constant; only the child side receives
    gradient.
    """
    child = T.as_tensor(child_dists)
    parent = np.asarray(parent_dists.data if isinstance(parent_dists, Tensor) else parent_dists)
    if child.shape[:-1] != parent.shape[:-1]:
        raise ValueError(f"position count mismatch between child {child.shape} and parent {parent.shape}; "
                         "parent and child must share the target vocabulary and target sentence")
    parent_t = Tensor(parent, dtype=child.data.dtype)
    rows = js_rows(child, parent_t) if cfg.divergence == "js" else kl_rows(child, parent_t)
    return _masked_token_mean(rows, mask)


def total_loss(nll, l_d, cfg: ConsistConfig) -> Tensor:
    """``nll + alpha * l_d``."""
    return T.add(T.as_tensor(nll), T.scale(T.as_tensor(l_d), cfg.alpha))


def rdrop_loss(dists_a, dists_b, mask, weight: float) -> Tensor:
    """Symmetric KL between two dropout-perturbed forwards, per-token mean, times ``weight``."""
    a, b = _pair(dists_a, dists_b)
    rows = T.scale(T.add(kl_rows(a, b), kl_rows(b, a)), 0.5)
    return T.scale(_masked_token_mean(rows, mask), weight)
