"""Condition tokens shared by trained networks and the analytic oracle."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

CLASS = "class"
NULL = "null"
QUALITY = "quality"
QUALITY_LEVELS = ("high", "low")


@dataclass(frozen=True)
class ConditionToken:
    """A class label, the null (unconditional) symbol, or a quality label."""

    tag: str
    value: object = None

    def __post_init__(self):
        if self.tag == CLASS:
            if not isinstance(self.value, (int, np.integer)) or self.value < 0:
                raise ValueError(f"class id must be a nonnegative int, got {self.value!r}")
            object.__setattr__(self, "value", int(self.value))
        elif self.tag == NULL:
            if self.value is not None:
                raise ValueError("null token carries no value")
        elif self.tag == QUALITY:
            if self.value not in QUALITY_LEVELS:
                raise ValueError(f"quality level must be one of {QUALITY_LEVELS}")
        else:
            raise ValueError(f"unknown condition tag {self.tag!r}")

    @classmethod
    def cls(cls, class_id: int) -> "ConditionToken":
        return cls(CLASS, class_id)

    @classmethod
    def null(cls) -> "ConditionToken":
        return cls(NULL)

    @classmethod
    def quality(cls, level: str) -> "ConditionToken":
        return cls(QUALITY, level)

    @property
    def is_null(self) -> bool:
        return self.tag == NULL

    @property
    def is_class(self) -> bool:
        return self.tag == CLASS

    def __str__(self):
        if self.tag == CLASS:
            return str(self.value)
        if self.tag == NULL:
            return "null"
        return f"quality:{self.value}"

    @classmethod
    def parse(cls, text) -> "ConditionToken":
        """Inverse of ``str``: ``"3"``, ``"null"``, ``"quality:high"``."""
        if isinstance(text, ConditionToken):
            return text
        if isinstance(text, (int, np.integer)):
            return cls.cls(int(text))
        text = str(text).strip()
        if text in ("null", "none", ""):
            return cls.null()
        if text.startswith("quality:"):
            return cls.quality(text.split(":", 1)[1])
        try:
            return cls.cls(int(text))
        except ValueError:
            raise ValueError(f"cannot parse condition {text!r}") from None


NULL_TOKEN = ConditionToken.null()
HIGH_QUALITY = ConditionToken.quality("high")
LOW_QUALITY = ConditionToken.quality("low")


def vocab_size(num_classes: int) -> int:
    """Classes, then null, then the two quality labels."""
    return num_classes + 3


def token_index(token: ConditionToken, num_classes: int) -> int:
    if token.tag == CLASS:
        if token.value >= num_classes:
            raise ValueError(f"class id {token.value} outside label set of size {num_classes}")
        return token.value
    if token.tag == NULL:
        return num_classes
    return num_classes + 1 + QUALITY_LEVELS.index(token.value)


def as_tokens(y, batch: int) -> list:
    """Broadcast a single token or a sequence of tokens/ints to ``batch`` tokens."""
    if isinstance(y, (ConditionToken, int, np.integer, str)):
        return [ConditionToken.parse(y)] * batch
    ys = [ConditionToken.parse(t) for t in y]
    if len(ys) != batch:
        raise ValueError(f"got {len(ys)} conditions for a batch of {batch}")
    return ys


def token_indices(y, batch: int, num_classes: int) -> np.ndarray:
    return np.array([token_index(t, num_classes) for t in as_tokens(y, batch)], dtype=np.int64)


def class_tokens(labels: Sequence[int]) -> list:
    return [ConditionToken.cls(int(c)) for c in labels]
