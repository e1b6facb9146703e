"""Entity-level precision/recall/F1 with exact span matching."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

from .schema import OUTSIDE


class EntitySpan(NamedTuple):
    type: str
    start: int
    end: int  # inclusive
    sentence: int = 0


def decode_bio(labels: Sequence[str], sentence: int = 0) -> set[EntitySpan]:
    """Spans from maximal ``B-X (I-X)*`` runs. An ``I-X`` that does not
    continue an ``X`` span opens a new one."""
    spans = set()
    cur_type, start = None, 0
    for i, lab in enumerate(list(labels) + [OUTSIDE]):
        prefix, typ = (lab[0], lab[2:]) if lab != OUTSIDE else (OUTSIDE, None)
        continues = prefix == "I" and typ == cur_type
        if cur_type is not None and not continues:
            spans.add(EntitySpan(cur_type, start, i - 1, sentence))
            cur_type = None
        if prefix in ("B", "I") and not continues:
            cur_type, start = typ, i
    return spans


def _prf(tp: int, n_pred: int, n_gold: int) -> tuple[float, float, float]:
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class StepMetrics:
    step: int
    micro_f1: float
    macro_f1: float
    micro_precision: float = 0.0
    micro_recall: float = 0.0
    per_type: dict[str, dict[str, float]] = field(default_factory=dict)

    def to_record(self) -> dict:
        return {"step": self.step, "mi_f1": self.micro_f1, "ma_f1": self.macro_f1,
                "mi_p": self.micro_precision, "mi_r": self.micro_recall,
                "per_type": self.per_type}


def f1_scores(pred: Iterable[EntitySpan], gold: Iterable[EntitySpan], types: Iterable[str],
              step: int = 0) -> StepMetrics:
    """Micro and macro F1 over ``types``; spans of other types are ignored."""
    types = sorted(set(types))
    if not types:
        raise ValueError("f1_scores: empty type set")
    keep = set(types)
    pred = {s for s in pred if s.type in keep}
    gold = {s for s in gold if s.type in keep}
    hits = pred & gold
    per_type = {}
    for t in types:
        tp = sum(1 for s in hits if s.type == t)
        n_pred = sum(1 for s in pred if s.type == t)
        n_gold = sum(1 for s in gold if s.type == t)
        p, r, f = _prf(tp, n_pred, n_gold)
        per_type[t] = {"precision": p, "recall": r, "f1": f, "support": n_gold}
    p, r, f = _prf(len(hits), len(pred), len(gold))
    macro = sum(v["f1"] for v in per_type.values()) / len(types)
    return StepMetrics(step=step, micro_f1=f, macro_f1=macro, micro_precision=p,
                       micro_recall=r, per_type=per_type)


def evaluate_sequences(pred: Sequence[Sequence[str]], gold: Sequence[Sequence[str]],
                       types: Iterable[str], step: int = 0) -> StepMetrics:
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predicted vs {len(gold)} gold sentences")
    pred_spans, gold_spans = set(), set()
    for i, (p, g) in enumerate(zip(pred, gold)):
        if len(p) != len(g):
            raise ValueError(f"sentence {i}: {len(p)} predicted vs {len(g)} gold labels")
        pred_spans |= decode_bio(p, i)
        gold_spans |= decode_bio(g, i)
    return f1_scores(pred_spans, gold_spans, types, step)


@dataclass
class RunSummary:
    steps: list[StepMetrics]
    mean_micro_f1: float
    mean_macro_f1: float

    @property
    def final(self) -> StepMetrics:
        return self.steps[-1]

    def micro_series(self) -> list[float]:
        return [m.micro_f1 for m in self.steps]

    def macro_series(self) -> list[float]:
        return [m.macro_f1 for m in self.steps]


def aggregate_run(metrics: Sequence[StepMetrics]) -> RunSummary:
    """Mean over all steps, the first included; the per-step series is kept."""
    if not metrics:
        raise ValueError("aggregate_run: no step metrics")
    n = len(metrics)
    return RunSummary(
        steps=list(metrics),
        mean_micro_f1=sum(m.micro_f1 for m in metrics) / n,
        mean_macro_f1=sum(m.macro_f1 for m in metrics) / n,
    )


def metrics_jsonl(metrics: Iterable[StepMetrics]) -> str:
    return "".join(json.dumps(m.to_record(), sort_keys=True) + "\n" for m in metrics)


def summary_csv(summary: RunSummary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["step", "mi_f1", "ma_f1"])
    for m in summary.steps:
        w.writerow([m.step, repr(m.micro_f1), repr(m.macro_f1)])
    w.writerow(["mean", repr(summary.mean_micro_f1), repr(summary.mean_macro_f1)])
    return buf.getvalue()
