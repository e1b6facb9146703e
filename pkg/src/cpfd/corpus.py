"""CoNLL ingestion, step schedules, slicing with label masking, synthetic data."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .schema import OUTSIDE

log = logging.getLogger(__name__)

PAD, UNK = "<PAD>", "<UNK>"


class FormatError(ValueError):
    pass


@dataclass
class Sentence:
    tokens: list[str]
    labels: list[str]

    def __post_init__(self):
        if len(self.tokens) != len(self.labels):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.labels)} labels")

    def types(self) -> set[str]:
        return {lab[2:] for lab in self.labels if lab != OUTSIDE}


def split_label(label: str) -> tuple[str, str]:
    if label == OUTSIDE:
        return OUTSIDE, ""
    if len(label) > 2 and label[1] == "-" and label[0] in "BI":
        return label[0], label[2:]
    raise FormatError(f"not a BIO label: {label!r}")


def repair_bio(labels: Sequence[str], repair: bool = True) -> list[str]:
    """Turn an ``I-X`` that does not continue an ``X`` span into ``B-X``.

    With ``repair=False`` such labels raise :class:`FormatError` instead.
    """
    out = []
    prev_type = None
    for i, lab in enumerate(labels):
        prefix, typ = split_label(lab)
        if prefix == "I" and prev_type != typ:
            if not repair:
                raise FormatError(f"position {i}: {lab} does not continue a {typ} span")
            lab = "B-" + typ
        out.append(lab)
        prev_type = typ if prefix != OUTSIDE else None
    return out


def read_conll(path, repair: bool = True) -> list[Sentence]:
    """Read ``token label`` lines (space or tab separated, label in the last
    column); blank lines end sentences and ``-DOCSTART-`` lines are skipped."""
    sentences: list[Sentence] = []
    tokens: list[str] = []
    labels: list[str] = []
    start_line = 0

    def flush():
        nonlocal tokens, labels
        if tokens:
            try:
                fixed = repair_bio(labels, repair)
            except FormatError as exc:
                raise FormatError(f"{path}:{start_line}: {exc}") from None
            sentences.append(Sentence(tokens, fixed))
        tokens, labels = [], []

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                flush()
                continue
            if parts[0] == "-DOCSTART-":
                flush()
                continue
            if len(parts) < 2:
                raise FormatError(f"{path}:{lineno}: expected 'token label', got {line.rstrip()!r}")
            try:
                split_label(parts[-1])
            except FormatError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if not tokens:
                start_line = lineno
            tokens.append(parts[0])
            labels.append(parts[-1])
    flush()
    return sentences


def format_conll(sentences: Iterable[Sentence]) -> str:
    return "".join(
        "".join(f"{t} {lab}\n" for t, lab in zip(s.tokens, s.labels)) + "\n" for s in sentences
    )


def write_conll(sentences: Iterable[Sentence], path) -> None:
    Path(path).write_text(format_conll(sentences), encoding="utf-8")


def entity_types(sentences: Iterable[Sentence]) -> list[str]:
    found: set[str] = set()
    for s in sentences:
        found |= s.types()
    return sorted(found)


# -- schedules and slicing --------------------------------------------------


@dataclass
class StepSchedule:
    types: list[str]
    fg: int
    pg: int
    steps: list[list[str]] = field(default_factory=list)

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    def seen(self, step: int) -> list[str]:
        """Types introduced in steps 1..step."""
        return [t for s in self.steps[:step] for t in s]


def build_schedule(types: Iterable[str], fg: int, pg: int) -> StepSchedule:
    types = sorted(set(types))
    if fg < 1 or pg < 1:
        raise ValueError(f"FG and PG must be >= 1, got FG={fg}, PG={pg}")
    if fg > len(types) or (len(types) - fg) % pg:
        raise ValueError(
            f"FG-{fg}-PG-{pg} does not partition {len(types)} entity types"
        )
    steps = [types[:fg]] + [types[i:i + pg] for i in range(fg, len(types), pg)]
    return StepSchedule(types=types, fg=fg, pg=pg, steps=steps)


def mask_labels(sentence: Sentence, keep: Iterable[str]) -> Sentence:
    keep = set(keep)
    labels = [lab if lab == OUTSIDE or lab[2:] in keep else OUTSIDE for lab in sentence.labels]
    return Sentence(list(sentence.tokens), labels)


@dataclass
class StepDataset:
    step: int
    split: str
    types: list[str]
    sentences: list[Sentence]

    def __len__(self) -> int:
        return len(self.sentences)


SLICE_POLICIES = ("first", "last", "balanced")


def slice_train(sentences: Sequence[Sentence], schedule: StepSchedule,
                policy: str = "first") -> list[list[int]]:
    """Assign each training sentence to exactly one step; returns index lists.

    ``first``: the earliest step whose types occur in the sentence.
    ``last``: the latest such step, so earlier-step entities in it are seen
    (masked to ``O``) when the later step is trained.
    ``balanced``: the matching step with the fewest sentences so far (ties to
    the earliest), so slices carry both earlier and later types as ``O``.
    Sentences without any scheduled type are dealt round-robin.
    """
    if policy not in SLICE_POLICIES:
        raise ValueError(f"unknown slice policy {policy!r}; expected one of {SLICE_POLICIES}")
    step_of = {t: i for i, types in enumerate(schedule.steps) for t in types}
    slices: list[list[int]] = [[] for _ in schedule.steps]
    rr = 0
    for idx, s in enumerate(sentences):
        hits = sorted(step_of[t] for t in s.types() if t in step_of)
        if hits:
            if policy == "first":
                k = hits[0]
            elif policy == "last":
                k = hits[-1]
            else:
                k = min(hits, key=lambda h: (len(slices[h]), h))
            slices[k].append(idx)
        else:
            slices[rr % len(slices)].append(idx)
            rr += 1
    return slices


@dataclass
class StepData:
    step: int
    train: StepDataset
    dev: StepDataset
    test: StepDataset


def slice_and_mask(train: Sequence[Sentence], dev: Sequence[Sentence], test: Sequence[Sentence],
                   schedule: StepSchedule, policy: str = "first") -> list[StepData]:
    """Per-step datasets: train and dev keep the step's own types, test keeps
    every type seen so far."""
    slices = slice_train(train, schedule, policy)
    out = []
    for t, (types, idxs) in enumerate(zip(schedule.steps, slices), 1):
        if not any(set(types) & train[i].types() for i in idxs):
            log.warning("step %d: no training sentence mentions %s", t, types)
        seen = schedule.seen(t)
        out.append(StepData(
            step=t,
            train=StepDataset(t, "train", list(types), [mask_labels(train[i], types) for i in idxs]),
            dev=StepDataset(t, "dev", list(types), [mask_labels(s, types) for s in dev]),
            test=StepDataset(t, "test", seen, [mask_labels(s, seen) for s in test]),
        ))
    return out


class Vocab:
    def __init__(self, tokens: Iterable[str]):
        self.itos = [PAD, UNK] + sorted(set(tokens) - {PAD, UNK})
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    def encode(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.stoi[UNK]
        return np.array([self.stoi.get(t, unk) for t in tokens], dtype=np.int64)

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sentence]) -> "Vocab":
        return cls(t for s in sentences for t in s.tokens)


# -- synthetic corpus -------------------------------------------------------

SYNTH_TYPE_NAMES = ["LOC", "MISC", "ORG", "PER", "AGE", "CITY", "DATE", "EVENT",
                    "FAC", "GPE", "LAW", "MONEY", "NORP", "PRODUCT", "TIME", "ZIP"]


@dataclass
class SynthConfig:
    num_types: int = 4
    per_type: int = 100
    vocab_size: int = 60
    lexicon_size: int = 8
    min_len: int = 6
    max_len: int = 12
    extra_entity_prob: float = 0.5
    cue_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for key in ("num_types", "per_type", "vocab_size", "lexicon_size", "min_len", "max_len"):
            if getattr(self, key) <= 0:
                raise ValueError(f"SynthConfig.{key} must be positive")
        if self.max_len < self.min_len:
            raise ValueError("max_len < min_len")


def synth_type_names(n: int) -> list[str]:
    if n <= len(SYNTH_TYPE_NAMES):
        return sorted(SYNTH_TYPE_NAMES[:n])
    return [f"T{i:02d}" for i in range(n)]


def generate_synthetic(cfg: SynthConfig) -> list[Sentence]:
    """Template sentences over a shared filler vocabulary.

    Each type owns disjoint lexicons of mention-initial and mention-internal
    words, plus a few cue words that tend to precede its mentions. Every type is the primary entity of
    ``per_type`` sentences; with probability ``extra_entity_prob`` a
    sentence also mentions a second, different type.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    types = synth_type_names(cfg.num_types)
    filler = [f"w{i}" for i in range(cfg.vocab_size)]
    begin = {t: [f"{t.lower()}{j}" for j in range(cfg.lexicon_size)] for t in types}
    inside = {t: [f"{t.lower()}_{j}" for j in range(cfg.lexicon_size)] for t in types}
    cues = {t: [f"cue_{t.lower()}{j}" for j in range(2)] for t in types}

    def mention(t):
        length = int(rng.integers(1, 4))
        words = [begin[t][int(rng.integers(cfg.lexicon_size))]]
        words += [inside[t][int(rng.integers(cfg.lexicon_size))] for _ in range(length - 1)]
        labels = ["B-" + t] + ["I-" + t] * (length - 1)
        if rng.random() < cfg.cue_prob:
            words = [cues[t][int(rng.integers(2))]] + words
            labels = [OUTSIDE] + labels
        return words, labels

    sentences = []
    for ti, t in enumerate(types):
        for _ in range(cfg.per_type):
            chosen = [t]
            if len(types) > 1 and rng.random() < cfg.extra_entity_prob:
                others = [u for u in types if u != t]
                chosen.append(others[int(rng.integers(len(others)))])
            n_fill = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            tokens = [filler[int(rng.integers(cfg.vocab_size))] for _ in range(n_fill)]
            labels = [OUTSIDE] * n_fill
            # insert mentions at distinct filler positions, back to front
            slots = sorted(rng.choice(n_fill + 1, size=len(chosen), replace=False).tolist(), reverse=True)
            order = rng.permutation(len(chosen)).tolist()
            for slot, k in zip(slots, order):
                words, labs = mention(chosen[k])
                tokens[slot:slot] = words
                labels[slot:slot] = labs
            sentences.append(Sentence(tokens, labels))
    perm = rng.permutation(len(sentences))
    return [sentences[i] for i in perm]


def split_corpus(sentences: Sequence[Sentence], rng: np.random.Generator,
                 dev_frac: float = 0.15, test_frac: float = 0.15):
    perm = rng.permutation(len(sentences))
    n_dev = int(round(dev_frac * len(sentences)))
    n_test = int(round(test_frac * len(sentences)))
    dev = [sentences[i] for i in perm[:n_dev]]
    test = [sentences[i] for i in perm[n_dev:n_dev + n_test]]
    train = [sentences[i] for i in perm[n_dev + n_test:]]
    return train, dev, test
