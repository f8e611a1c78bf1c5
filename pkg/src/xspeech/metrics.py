"""F1 evaluation, agreement analysis and table rendering."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .corpus import CLASS_NAMES

UNPARSED_ROW = 3
ROW_NAMES = ("Derogatory", "Exclusionary", "Dangerous", "F1-macro")


class MetricsError(ValueError):
    pass


def _label_of(pred) -> int | None:
    return getattr(pred, "label", pred)


def _check_ids(a: Mapping, b: Mapping, what: str = "prediction and gold") -> None:
    if a.keys() != b.keys():
        diff = sorted(a.keys() ^ b.keys())
        shown = ", ".join(diff[:20]) + (" ..." if len(diff) > 20 else "")
        raise MetricsError(f"{what} id sets differ in {len(diff)} id(s): {shown}")


@dataclass(frozen=True)
class ConfusionMatrix:
    """counts[pred][gold]; pred rows 0-2 plus row 3 for unparsed answers."""

    counts: tuple[tuple[int, int, int], ...]

    @property
    def total(self) -> int:
        return sum(map(sum, self.counts))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pred\\gold", *CLASS_NAMES])
        for name, row in zip((*CLASS_NAMES, "unparsed"), self.counts):
            w.writerow([name, *row])
        return buf.getvalue()


def confusion(preds: Mapping[str, object], golds: Mapping[str, int]) -> ConfusionMatrix:
    """Tally predictions (labels, ParsedOutputs or None) against gold labels."""
    _check_ids(preds, golds)
    grid = [[0, 0, 0] for _ in range(4)]
    for sid, gold in golds.items():
        label = _label_of(preds[sid])
        grid[UNPARSED_ROW if label is None else label][gold] += 1
    return ConfusionMatrix(tuple(tuple(r) for r in grid))


@dataclass(frozen=True)
class EvalReport:
    per_class_f1: tuple[float, float, float]
    f1_macro: float
    confusion: ConfusionMatrix
    n: int
    unparsed_count: int

    def to_dict(self) -> dict:
        return {
            "per_class_f1": dict(zip(CLASS_NAMES, self.per_class_f1)),
            "f1_macro": self.f1_macro,
            "n": self.n,
            "unparsed_count": self.unparsed_count,
            "confusion": [list(r) for r in self.confusion.counts],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EvalReport":
        return cls(
            per_class_f1=tuple(d["per_class_f1"][c] for c in CLASS_NAMES),
            f1_macro=d["f1_macro"],
            confusion=ConfusionMatrix(tuple(tuple(r) for r in d["confusion"])),
            n=d["n"],
            unparsed_count=d["unparsed_count"],
        )


def macro_f1(per_class: Sequence[float]) -> float:
    return math.fsum(per_class) / len(per_class)


def f1_scores(cm: ConfusionMatrix) -> EvalReport:
    """Per-class F1 = 2TP / (2TP + FP + FN), 0 when the denominator is 0.

    Unparsed answers count as false negatives of their gold class and as
    false positives of none.
    """
    if cm.total <= 0:
        raise MetricsError("cannot score an empty confusion matrix")
    c = cm.counts
    per_class = []
    for k in range(3):
        tp = c[k][k]
        fp = sum(c[k]) - tp
        fn = sum(c[r][k] for r in range(4)) - tp
        denom = 2 * tp + fp + fn
        per_class.append(2 * tp / denom if denom else 0.0)
    return EvalReport(tuple(per_class), macro_f1(per_class), cm, cm.total, sum(c[UNPARSED_ROW]))


def evaluate(preds: Mapping[str, object], golds: Mapping[str, int]) -> EvalReport:
    return f1_scores(confusion(preds, golds))


def agreement(preds_a: Mapping[str, object], preds_b: Mapping[str, object], golds: Mapping[str, int]) -> tuple[float, float]:
    """(share of ids with identical answers, Jaccard index of the two error sets).

    Unparsed is its own answer and always an error. When neither model makes a
    mistake the overlap is 1.0.
    """
    _check_ids(preds_a, preds_b, "prediction")
    _check_ids(preds_a, golds)
    if not golds:
        raise MetricsError("agreement needs at least one id")
    same = sum(1 for sid in golds if _label_of(preds_a[sid]) == _label_of(preds_b[sid]))
    err_a = {sid for sid, g in golds.items() if _label_of(preds_a[sid]) != g}
    err_b = {sid for sid, g in golds.items() if _label_of(preds_b[sid]) != g}
    union = err_a | err_b
    overlap = len(err_a & err_b) / len(union) if union else 1.0
    return same / len(golds), overlap


def agreement_matrix_csv(runs: Mapping[str, Mapping[str, object]], golds: Mapping[str, int]) -> str:
    """Models x models grid of ``agreement/error_overlap`` cells."""
    names = list(runs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *names])
    for a in names:
        row = [a]
        for b in names:
            rate, overlap = agreement(runs[a], runs[b], golds)
            row.append(f"{rate:.4f}/{overlap:.4f}")
        w.writerow(row)
    return buf.getvalue()


def _pct(x: float) -> str:
    return f"{x * 100:.2f}"


def render_report(reports: Mapping[str, EvalReport], fmt: str = "markdown") -> str:
    """Rows are the three classes plus F1-macro, one column per run, values in percent."""
    if not reports:
        raise MetricsError("nothing to render")
    names = list(reports)
    rows = []
    for i, row_name in enumerate(ROW_NAMES):
        vals = [r.f1_macro if i == 3 else r.per_class_f1[i] for r in reports.values()]
        rows.append([row_name, *map(_pct, vals)])
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["Label", *names])
        w.writerows(rows)
        return buf.getvalue()
    if fmt != "markdown":
        raise MetricsError(f"unknown report format {fmt!r}")
    lines = ["| Label | " + " | ".join(names) + " |", "|---|" + "---:|" * len(names)]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"
