"""Attention-map distillation losses and the KL logit penalty.

Attention stacks have shape ``(..., K, n, n)``: heads, queries, keys. Any
leading axes (layers, and a batch axis when present) are summed over.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

VARIANTS = ("fd", "pfd-lax", "pfd")

_HEAD, _QUERY, _KEY = -3, -2, -1


@dataclass
class DistillConfig:
    variant: str = "pfd"
    lam: float = 2.0
    kl_weight: float = 1.0
    kl_temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown distillation variant {self.variant!r}; expected one of {VARIANTS}")
        if self.lam < 0 or self.kl_weight < 0:
            raise ValueError("lambda and kl_weight must be non-negative")
        if self.kl_temperature <= 0:
            raise ValueError("kl_temperature must be positive")


def _check(attn_new: Tensor, attn_old, name: str) -> Tensor:
    attn_old = ad.as_tensor(attn_old)
    if attn_new.shape != attn_old.shape:
        raise ValueError(f"{name}: attention shapes differ: {attn_new.shape} vs {attn_old.shape}")
    if attn_new.ndim < 3:
        raise ValueError(f"{name}: expected (..., heads, n, n) stacks, got {attn_new.shape}")
    return attn_old


def _pooled(attn_new: Tensor, attn_old: Tensor, axis) -> Tensor:
    return ad.sq_diff_sum(ad.sum(attn_new, axis=axis), ad.sum(attn_old, axis=axis))


def fd_loss(attn_new: Tensor, attn_old) -> Tensor:
    """Elementwise squared difference summed over every axis."""
    attn_old = _check(attn_new, attn_old, "fd_loss")
    return ad.sq_diff_sum(attn_new, attn_old)


def pfd_lax_loss(attn_new: Tensor, attn_old) -> Tensor:
    """Both sequence axes pooled; only the head axis survives."""
    attn_old = _check(attn_new, attn_old, "pfd_lax_loss")
    return _pooled(attn_new, attn_old, (_QUERY, _KEY))


def pfd_terms(attn_new: Tensor, attn_old) -> tuple[Tensor, Tensor, Tensor]:
    """The three singly pooled terms: over heads, over queries, over keys."""
    attn_old = _check(attn_new, attn_old, "pfd_loss")
    return (_pooled(attn_new, attn_old, _HEAD),
            _pooled(attn_new, attn_old, _QUERY),
            _pooled(attn_new, attn_old, _KEY))


def pfd_loss(attn_new: Tensor, attn_old) -> Tensor:
    a, b, c = pfd_terms(attn_new, attn_old)
    return ad.add(ad.add(a, b), c)


LOSSES = {"fd": fd_loss, "pfd-lax": pfd_lax_loss, "pfd": pfd_loss}


def attention_loss(variant: str, attn_new: Tensor, attn_old) -> Tensor:
    return LOSSES[variant](attn_new, attn_old)


def kl_logit_loss(logits_new: Tensor, logits_old, temperature: float = 1.0,
                  mask: np.ndarray | None = None) -> Tensor:
    """Mean over tokens of KL(old || new) on the old-class columns.

    ``mask`` (same leading shape as the logits, without the class axis)
    selects the real tokens of a padded batch.
    """
    logits_old = ad.as_tensor(logits_old)
    c_old = logits_old.shape[-1]
    if logits_new.shape[:-1] != logits_old.shape[:-1] or c_old > logits_new.shape[-1]:
        raise ValueError(
            f"kl_logit_loss: incompatible logits {logits_new.shape} (new) vs {logits_old.shape} (old)"
        )
    inv_t = 1.0 / temperature
    log_p_old = ad.log_softmax(ad.scale(logits_old, inv_t)).data
    p_old = np.exp(log_p_old)
    log_q = ad.log_softmax(ad.scale(ad.slice_last(logits_new, 0, c_old), inv_t))
    if mask is None:
        mask = np.ones(logits_new.shape[:-1])
    mask = np.asarray(mask, dtype=np.float64)
    count = mask.sum()
    if count == 0:
        raise ValueError("kl_logit_loss: no tokens selected")
    w = p_old * mask[..., None]
    const = float((w * log_p_old).sum())
    cross = ad.sum(ad.mul(log_q, w))
    return ad.scale(ad.sub(const, cross), 1.0 / count)
