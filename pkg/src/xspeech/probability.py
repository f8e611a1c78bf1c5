"""Class probabilities from the logprobs of the label token."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .promptkit import STANDALONE_DIGIT, PromptStyle

FLOOR = 1e-10
DIGITS = ("0", "1", "2")


class ExtractionError(ValueError):
    """The response logprobs do not expose a usable label distribution."""


@dataclass(frozen=True)
class ClassDistribution:
    p: tuple[float, float, float]

    def __post_init__(self):
        if len(self.p) != 3 or any(x < 0 or math.isnan(x) for x in self.p):
            raise ValueError(f"invalid class distribution {self.p}")
        if abs(math.fsum(self.p) - 1.0) > 1e-9:
            raise ValueError(f"class distribution sums to {math.fsum(self.p)}")

    def __getitem__(self, c: int) -> float:
        return self.p[c]

    def to_list(self) -> list[float]:
        return list(self.p)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "ClassDistribution":
        return cls(tuple(float(v) for v in values))


def locate_label_position(token_logprobs: Sequence, style: PromptStyle, label: int) -> int:
    """Index of the token carrying the parsed label digit.

    DirectLabel answers use the first matching token, JustifyThenLabel answers
    the last one.
    """
    digit = str(label)
    hits = [
        i
        for i, tl in enumerate(token_logprobs)
        if any(m.group() == digit for m in STANDALONE_DIGIT.finditer(tl.token))
    ]
    if not hits:
        raise ExtractionError(f"no output token carries the label digit {digit}")
    return hits[0] if style == PromptStyle.DIRECT else hits[-1]


def class_distribution(alternatives: Iterable[tuple[str, float]]) -> ClassDistribution:
    """Renormalize exp(logprob) over the three digit tokens.

    Surface variants of a digit (" 0", "0\\n") collapse onto the same class by
    taking their best logprob. Classes absent from the top-K list get a mass
    of FLOOR.
    """
    best: list[float | None] = [None, None, None]
    for token, lp in alternatives:
        t = token.strip()
        if t in DIGITS:
            c = int(t)
            if best[c] is None or lp > best[c]:
                best[c] = lp
    present = [lp for lp in best if lp is not None]
    if not present:
        raise ExtractionError("none of the class digits appear among the top logprobs")
    logs = [lp if lp is not None else math.log(FLOOR) for lp in best]
    top = max(logs)
    weights = [math.exp(lp - top) for lp in logs]
    total = math.fsum(weights)
    return ClassDistribution(tuple(w / total for w in weights))


def predicted_label(dist: ClassDistribution) -> int:
    """Argmax; ties go to the lowest class code."""
    return max(range(3), key=lambda c: (dist.p[c], -c))
