"""BIO label space that grows by one block of entity types per step."""

from __future__ import annotations

from typing import Iterable, Sequence

import numpy as np

OUTSIDE = "O"
IGNORE = -1


class LabelSchema:
    """Ordered class list: ``O`` first, then ``B-X``/``I-X`` pairs per step.

    >>> s = LabelSchema()
    >>> s.add_step(["LOC"]); s.add_step(["ORG"])
    2
    2
    >>> s.labels
    ['O', 'B-LOC', 'I-LOC', 'B-ORG', 'I-ORG']
    >>> list(s.old_classes()), list(s.new_classes())
    ([0, 1, 2], [3, 4])
    """

    def __init__(self, steps: Iterable[Sequence[str]] = ()):
        self.steps: list[list[str]] = []
        self.labels: list[str] = [OUTSIDE]
        self._index: dict[str, int] = {OUTSIDE: 0}
        for types in steps:
            self.add_step(types)

    def add_step(self, types: Sequence[str]) -> int:
        types = list(types)
        if not types:
            raise ValueError("a step must introduce at least one entity type")
        for t in types:
            if t in self.types:
                raise ValueError(f"entity type {t!r} already registered")
        self.steps.append(types)
        for t in types:
            for prefix in ("B-", "I-"):
                self._index[prefix + t] = len(self.labels)
                self.labels.append(prefix + t)
        return 2 * len(types)

    @property
    def types(self) -> list[str]:
        return [t for step in self.steps for t in step]

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def num_classes_at(self, step: int) -> int:
        """Class count after ``step`` (1-based) steps; 1 for step 0."""
        return 1 + 2 * sum(len(s) for s in self.steps[:step])

    def old_classes(self, step: int | None = None) -> range:
        step = len(self.steps) if step is None else step
        return range(0, self.num_classes_at(step - 1))

    def new_classes(self, step: int | None = None) -> range:
        step = len(self.steps) if step is None else step
        return range(self.num_classes_at(step - 1), self.num_classes_at(step))

    def index(self, label: str) -> int:
        try:
            return self._index[label]
        except KeyError:
            raise KeyError(f"label {label!r} is not in the schema {self.labels}") from None

    def encode(self, labels: Sequence[str]) -> np.ndarray:
        return np.array([self.index(lab) for lab in labels], dtype=np.int64)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.labels[i] for i in ids]

    def to_dict(self) -> dict:
        return {"steps": [list(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelSchema":
        return cls(d["steps"])

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelSchema) and self.steps == other.steps

    def __repr__(self) -> str:
        return f"LabelSchema(steps={self.steps})"
