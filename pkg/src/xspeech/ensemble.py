"""F1-macro weighted fusion of several models' predictions."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .probability import ClassDistribution
from .records import InferenceRecord

log = logging.getLogger(__name__)


class FusionError(ValueError):
    pass


@dataclass(frozen=True)
class EnsembleSpec:
    members: tuple[str, ...]
    weights: Mapping[str, float]

    def __post_init__(self):
        if len(self.members) < 2:
            raise FusionError(f"an ensemble needs at least 2 members, got {len(self.members)}")
        for m in self.members:
            w = self.weights.get(m)
            if w is None:
                raise FusionError(f"member {m} has no weight")
            if not w > 0:
                raise FusionError(f"member {m} has non-positive weight {w}")


def compute_weights(dev_reports: Mapping[str, "object"]) -> EnsembleSpec:
    """Each member is weighted by its F1-macro on the held-out dev split."""
    weights = {}
    for model, report in dev_reports.items():
        if report.f1_macro <= 0:
            raise FusionError(f"model {model} has F1-macro 0 on dev and would carry no weight")
        weights[model] = report.f1_macro
    return EnsembleSpec(tuple(dev_reports), weights)


def _argmax(scores) -> int:
    return max(range(3), key=lambda c: (scores[c], -c))


def vote_weighted(predictions: Mapping[str, int | None], weights: Mapping[str, float]) -> int:
    """Each vote counts with its model's weight; missing (None) predictions abstain."""
    votes: list[list[float]] = [[], [], []]
    for model, label in predictions.items():
        if label is None:
            log.warning("member %s abstains (unparsed prediction)", model)
            continue
        votes[label].append(weights[model])
    if not any(votes):
        raise FusionError("every ensemble member abstained")
    return _argmax([math.fsum(v) for v in votes])


def prob_weighted(distributions: Mapping[str, ClassDistribution | None], weights: Mapping[str, float]) -> int:
    """Argmax of the weight-averaged class distribution; members without one abstain."""
    present = {m: d for m, d in distributions.items() if d is not None}
    for m in (m for m in distributions if m not in present):
        log.warning("member %s abstains (no class distribution)", m)
    if not present:
        raise FusionError("every ensemble member abstained")
    return _argmax(weighted_average(present, weights).p)


def weighted_average(distributions: Mapping[str, ClassDistribution], weights: Mapping[str, float]) -> ClassDistribution:
    total = math.fsum(weights[m] for m in distributions)
    avg = [math.fsum(weights[m] * d.p[c] for m, d in distributions.items()) / total for c in range(3)]
    return ClassDistribution(tuple(avg))


def fuse_records(runs: Mapping[str, Sequence[InferenceRecord]], spec: EnsembleSpec, rule: str) -> list[InferenceRecord]:
    """Fuse member runs sample by sample into single-model style records.

    Samples on which every member abstains come back unparsed with a note.
    """
    if rule not in ("vote", "prob"):
        raise FusionError(f"unknown fusion rule {rule!r}")
    by_member = {m: {r.sample_id: r for r in runs[m]} for m in spec.members}
    first = runs[spec.members[0]]
    ids = [r.sample_id for r in first]
    for m, recs in by_member.items():
        if recs.keys() != set(ids):
            raise FusionError(f"member {m} covers a different set of samples")
    out = []
    for sid in ids:
        try:
            if rule == "vote":
                label = vote_weighted({m: by_member[m][sid].label for m in spec.members}, spec.weights)
                out.append(InferenceRecord(sid, "", label=label))
            else:
                dists = {m: by_member[m][sid].distribution for m in spec.members}
                present = {m: d for m, d in dists.items() if d is not None}
                label = prob_weighted(dists, spec.weights)
                out.append(InferenceRecord(sid, "", label=label, distribution=weighted_average(present, spec.weights)))
        except FusionError as exc:
            out.append(InferenceRecord(sid, "", error=str(exc)))
    return out
