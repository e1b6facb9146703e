"""Pseudo-labels for non-entity tokens from a frozen previous-step model.

Targets are stored as class indices with ``IGNORE`` (-1) marking an empty
row; :func:`one_hot` expands them to the 0/1 target matrix.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .schema import IGNORE

MODES = ("none", "vpl", "cpl")


def token_entropy(probs, atol: float = 1e-6) -> float:
    """Shannon entropy in nats, with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 1 or p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError(f"token_entropy: not a probability distribution: {p}")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropies(probs: np.ndarray) -> np.ndarray:
    """Row-wise entropy of an ``(n, C)`` probability matrix."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def median(values: Sequence[float]) -> float:
    v = sorted(values)
    if not v:
        raise ValueError("median of empty list")
    mid = len(v) // 2
    return v[mid] if len(v) % 2 else 0.5 * (v[mid - 1] + v[mid])


@dataclass
class ThresholdTable:
    """Median old-model entropy per predicted old class."""

    thresholds: dict[int, float] = field(default_factory=dict)
    counts: dict[int, int] = field(default_factory=dict)

    def get(self, cls: int) -> float | None:
        return self.thresholds.get(cls)

    @classmethod
    def from_groups(cls, groups: dict[int, list[float]]) -> "ThresholdTable":
        table = cls()
        for c in sorted(groups):
            table.counts[c] = len(groups[c])
            if groups[c]:
                table.thresholds[c] = median(groups[c])
        return table


def build_threshold_table(gold: Sequence[np.ndarray], old_probs: Sequence[np.ndarray],
                          outside: int = 0) -> ThresholdTable:
    """Group gold-``O`` tokens by old-model argmax and take median entropies.

    ``gold`` holds one class-index array per sentence, ``old_probs`` the
    matching ``(n, C_old)`` old-model probabilities.
    """
    groups: dict[int, list[float]] = defaultdict(list)
    for g, p in zip(gold, old_probs):
        g = np.asarray(g)
        sel = g == outside
        if not sel.any():
            continue
        pred = p[sel].argmax(axis=-1)
        u = entropies(p[sel])
        for c, val in zip(pred.tolist(), u.tolist()):
            groups[c].append(val)
    return ThresholdTable.from_groups(groups)


def keep_pseudo(u: float, tau: float | None) -> bool:
    return tau is not None and u < tau


def vanilla_pseudo_target(gt: int, old_probs, outside: int = 0) -> int:
    if gt != outside:
        return gt
    return int(np.argmax(old_probs))


def confident_pseudo_target(gt: int, old_probs, table: ThresholdTable, outside: int = 0) -> int:
    if gt != outside:
        return gt
    e = int(np.argmax(old_probs))
    u = float(entropies(np.asarray(old_probs)[None, :])[0])
    return e if keep_pseudo(u, table.get(e)) else IGNORE


def pseudo_targets(gold: np.ndarray, old_probs: np.ndarray | None, mode: str,
                   table: ThresholdTable | None = None, outside: int = 0) -> np.ndarray:
    """Vectorised target row construction for one sentence."""
    if mode not in MODES:
        raise ValueError(f"unknown pseudo-label mode {mode!r}; expected one of {MODES}")
    gold = np.asarray(gold, dtype=np.int64)
    if mode == "none" or old_probs is None:
        return gold.copy()
    out = gold.copy()
    sel = gold == outside
    pred = old_probs.argmax(axis=-1)
    if mode == "vpl":
        out[sel] = pred[sel]
        return out
    if table is None:
        raise ValueError("confidence-based pseudo-labels need a threshold table")
    u = entropies(old_probs)
    for i in np.flatnonzero(sel):
        e = int(pred[i])
        out[i] = e if keep_pseudo(float(u[i]), table.get(e)) else IGNORE
    return out


def one_hot(targets: np.ndarray, num_classes: int) -> np.ndarray:
    """Expand class indices to a 0/1 matrix; ``IGNORE`` rows stay all zero."""
    t = np.asarray(targets)
    out = np.zeros(t.shape + (num_classes,))
    valid = t >= 0
    out[valid, t[valid]] = 1.0
    return out


def format_pseudo_dump(tokens: Sequence[str], gold: Sequence[str], vpl: Sequence[str],
                       cpl: Sequence[str]) -> str:
    """CoNLL block: token, current gold label, VPL label, CPL label or IGN."""
    return "".join(f"{t}\t{g}\t{v}\t{c}\n" for t, g, v, c in zip(tokens, gold, vpl, cpl))
