"""Adaptation objectives: Shannon entropy, augmentation consistency, NLL.

The consistency term scores agreement between a batch's logits and the
logits of a jittered copy, with the clean prediction detached as pseudo
label. Its literal form applies an elementwise sigmoid to both logit
vectors; a softmax variant is available behind ``kind`` for comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossConfig:
    """Weights and augmentation knobs for the total adaptation loss."""

    lam: float = 0.1
    noise_scale: float = 0.1
    feature_scaling: bool = True
    scale_low: float = 0.9
    scale_high: float = 1.1
    consistency_kind: str = "sigmoid"  # sigmoid | softmax

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"consistency weight must be >= 0, got {self.lam}")
        if self.consistency_kind not in ("sigmoid", "softmax"):
            raise ValueError(f"unknown consistency kind {self.consistency_kind!r}")


def entropy_loss(logits: Tensor) -> Tensor:
    """Batch mean of the Shannon entropy of softmax(logits)."""
    if logits.data.ndim != 2 or logits.data.shape[1] < 2:
        raise ValueError(
            f"entropy_loss: need [batch, C>=2] logits, got shape {logits.data.shape}"
        )
    n = logits.data.shape[0]
    ls = ad.log_softmax(logits)
    p = ad.exp(ls)
    return ad.sum_all(ad.mul(p, ls)) * (-1.0 / n)


def consistency_loss(logits: Tensor, aug_logits: Tensor, kind: str = "sigmoid") -> Tensor:
    """Cross-entropy-style agreement between clean and augmented logits.

    The clean logits act as pseudo label and are detached: no gradient
    flows through them. ``kind="sigmoid"`` weighs each class term by
    sigmoid(y_c) against log sigmoid(yhat_c); ``kind="softmax"`` uses the
    conventional softmax/log-softmax pairing instead.
    """
    if logits.data.shape != aug_logits.data.shape:
        raise ad.ShapeError(
            f"consistency_loss: incompatible shapes {logits.data.shape} and "
            f"{aug_logits.data.shape}"
        )
    n = logits.data.shape[0]
    if kind == "sigmoid":
        weights = ad.constant(_stable_sigmoid(logits.data))
        log_term = ad.log_sigmoid(aug_logits)
    elif kind == "softmax":
        shifted = logits.data - logits.data.max(axis=1, keepdims=True)
        sm = np.exp(shifted)
        weights = ad.constant(sm / sm.sum(axis=1, keepdims=True))
        log_term = ad.log_softmax(aug_logits)
    else:
        raise ValueError(f"unknown consistency kind {kind!r}")
    return ad.sum_all(ad.mul(weights, log_term)) * (-1.0 / n)


def _stable_sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def total_loss(logits: Tensor, aug_logits: Tensor | None, lam: float, kind: str = "sigmoid") -> Tensor:
    """entropy + lam * consistency; lam = 0 is exactly the entropy term."""
    ent = entropy_loss(logits)
    if lam == 0.0 or aug_logits is None:
        return ent
    return ad.add(ent, consistency_loss(logits, aug_logits, kind=kind) * lam)


def augment(batch: np.ndarray, rng: np.random.Generator, cfg: LossConfig) -> np.ndarray:
    """Additive Gaussian jitter plus mild positive feature rescaling.

    With a zero noise scale and feature scaling disabled the batch is
    returned unchanged (bitwise); otherwise draws are fully determined
    by the generator state.
    """
    x = np.asarray(batch, dtype=np.float64)
    if x.size == 0:
        raise ValueError("augment: empty batch")
    out = x
    if cfg.noise_scale > 0.0:
        out = out + cfg.noise_scale * rng.standard_normal(x.shape)
    if cfg.feature_scaling:
        out = out * rng.uniform(cfg.scale_low, cfg.scale_high, size=x.shape)
    return out.copy() if out is x else out


def nll_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    labels = np.asarray(labels)
    c = logits.data.shape[1]
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise ValueError(
            f"nll_loss: labels must lie in [0, {c}), got range "
            f"[{labels.min()}, {labels.max()}]"
        )
    n = logits.data.shape[0]
    ls = ad.log_softmax(logits)
    return ad.sum_all(ad.take_per_row(ls, labels)) * (-1.0 / n)
