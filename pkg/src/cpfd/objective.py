"""Type-balanced pseudo-label cross-entropy and total-loss assembly."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .distill import DistillConfig
from .pseudo import one_hot


def sigmoid(x: float) -> float:
    return 1.0 / (1.0 + math.exp(-x))


@dataclass
class ReweightPlan:
    n_old: int
    n_new: int
    weights: np.ndarray
    old_weight: float


def old_type_weight(n_old: int, n_new: int) -> float:
    if n_new == 0:
        return 1.5
    return 0.5 + sigmoid(n_old / n_new)


def compute_weights(targets: np.ndarray, old_classes: range, new_classes: range,
                    outside: int = 0, counts: tuple[int, int] | None = None) -> ReweightPlan:
    """Per-token weights: old entity types get 0.5 + sigmoid(N_old / N_new), the rest 1.

    ``targets`` are class indices (negative = ignored or padding). Pass
    ``counts=(n_old, n_new)`` to use totals gathered over a wider scope than
    this batch.
    """
    t = np.asarray(targets)
    is_old = (t >= old_classes.start) & (t < old_classes.stop) & (t != outside)
    is_new = (t >= new_classes.start) & (t < new_classes.stop)
    n_old, n_new = counts if counts is not None else (int(is_old.sum()), int(is_new.sum()))
    w_old = old_type_weight(n_old, n_new)
    weights = np.where(is_old, w_old, 1.0)
    return ReweightPlan(n_old=n_old, n_new=n_new, weights=weights, old_weight=w_old)


def balanced_pseudo_ce(logits: Tensor, targets, weights=None, lengths=None) -> Tensor:
    """Weighted cross-entropy, divided by the full token count of each sequence.

    ``logits`` is ``(n, C)`` or a padded batch ``(B, n, C)``; ``targets`` is
    either class indices (negative = ignored) or the 0/1 target matrix. For
    batches the per-sequence losses are averaged; ``lengths`` gives the real
    token counts (default: ``n``).
    """
    targets = np.asarray(targets)
    if targets.shape == logits.shape:
        y = targets.astype(np.float64)
    elif targets.shape == logits.shape[:-1]:
        y = one_hot(targets, logits.shape[-1])
    else:
        raise ValueError(f"balanced_pseudo_ce: targets {targets.shape} do not match logits {logits.shape}")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != logits.shape[:-1]:
            raise ValueError(f"balanced_pseudo_ce: weights {weights.shape} do not match logits {logits.shape}")
        y = y * weights[..., None]
    if logits.ndim == 2:
        denom = np.float64(logits.shape[0])
        scale_ = y / denom
    else:
        B, n = logits.shape[:2]
        lens = np.full(B, n, dtype=np.float64) if lengths is None else np.asarray(lengths, dtype=np.float64)
        scale_ = y / (lens[:, None, None] * B)
    return ad.scale(ad.sum(ad.mul(ad.log_softmax(logits), scale_)), -1.0)


def total_loss(ce: Tensor, config: DistillConfig, attn_loss: Tensor | None = None,
               kl: Tensor | None = None) -> Tensor:
    """ce + lambda * attention distillation + kl_weight * KL; terms left as None are absent."""
    loss = ce
    if attn_loss is not None and config.lam:
        loss = ad.add(loss, ad.scale(attn_loss, config.lam))
    if kl is not None and config.kl_weight:
        loss = ad.add(loss, ad.scale(kl, config.kl_weight))
    return loss
