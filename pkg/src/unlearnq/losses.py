"""Entropy, the entropy-guided forgetting loss, and the cross-entropy retain loss.

All logs are natural. ``0 * log 0`` is taken as 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import NetConfig, ParameterSet, forward, log_softmax, softmax

LOSS_TAGS = ("entropy", "forget", "retain", "total")


@dataclass(frozen=True)
class LossValue:
    value: float
    kind: str

    def __post_init__(self):
        if self.kind not in LOSS_TAGS:
            raise ValueError(f"unknown loss tag {self.kind!r}")
        if not np.isfinite(self.value):
            raise ValueError(f"{self.kind} loss is not finite: {self.value!r}")

    def __float__(self):
        return float(self.value)


def _plogp(p: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)


def entropy(p) -> float | np.ndarray:
    """Shannon entropy along the last axis."""
    p = np.asarray(p, dtype=np.float64)
    h = -_plogp(p).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def kl_to_uniform(p) -> float | np.ndarray:
    """KL(p || uniform) along the last axis, ``sum p log(p K)``."""
    p = np.asarray(p, dtype=np.float64)
    k = p.shape[-1]
    kl = (_plogp(p) + p * np.log(k)).sum(axis=-1)
    return float(kl) if kl.ndim == 0 else kl


def _labels(y, n: int, k: int) -> np.ndarray:
    if y is None:
        raise ValueError("labels are required for cross-entropy")
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise ValueError("labels must be integers")
    if (y < 0).any() or (y >= k).any():
        raise ValueError(f"labels must lie in [0, {k})")
    return y


def logits_loss(kind: str, logits: np.ndarray, y=None) -> tuple[float, np.ndarray]:
    """Mean batch loss over logits and its gradient w.r.t. the logits."""
    n, k = logits.shape
    if n == 0:
        raise ValueError("empty batch")
    logp = log_softmax(logits)
    p = np.exp(logp)
    if kind == "forget_entropy":
        # L = mean sum_k p log p; dL/dz_j = p_j (log p_j - sum_k p_k log p_k)
        neg_h = (p * logp).sum(axis=1)
        dz = p * (logp - neg_h[:, None]) / n
        return float(neg_h.mean()), dz
    y = _labels(y, n, k)
    ce = -logp[np.arange(n), y]
    dz = p.copy()
    dz[np.arange(n), y] -= 1.0
    dz /= n
    if kind == "retain_ce":
        return float(ce.mean()), dz
    if kind == "negated_ce":
        return -float(ce.mean()), -dz
    raise ValueError(f"unknown loss kind {kind!r}")


def forget_loss(params: ParameterSet, x, cfg: NetConfig) -> LossValue:
    """Mean of ``sum_k p log p`` over the forget batch (negative mean entropy)."""
    logits = forward(params, x, cfg)
    return LossValue(logits_loss("forget_entropy", logits)[0], "forget")


def retain_loss(params: ParameterSet, x, y, cfg: NetConfig) -> LossValue:
    logits = forward(params, x, cfg)
    return LossValue(logits_loss("retain_ce", logits, y)[0], "retain")


def total_loss(forget: float, retain: float, beta: float) -> float:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return float(forget) + beta * float(retain)


def mean_entropy(params: ParameterSet, x, cfg: NetConfig) -> float:
    return float(np.mean(entropy(softmax(forward(params, x, cfg)))))
