"""SFT and DPO dataset construction and their JSONL wire formats."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .corpus import Sample
from .probability import ClassDistribution
from .promptkit import Message, PromptStyle, TemplateSet, parse_output, render_prompt
from .records import InferenceRecord

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class TrainsetError(ValueError):
    pass


class SftVariant(str, Enum):
    LABEL_ONLY = "label-only"
    WITH_JUSTIFICATION = "with-justification"


@dataclass(frozen=True)
class SftRecord:
    messages: tuple[Message, ...]
    completion: str

    def to_dict(self) -> dict:
        return {"messages": [m.to_dict() for m in self.messages], "completion": self.completion}

    @classmethod
    def from_dict(cls, d) -> "SftRecord":
        return cls(tuple(Message.from_dict(m) for m in d["messages"]), d["completion"])


@dataclass(frozen=True)
class PreferencePair:
    prompt: tuple[Message, ...]
    chosen: str
    rejected: str

    def __post_init__(self):
        if self.chosen == self.rejected:
            raise ValueError("chosen and rejected completions must differ")

    def to_dict(self) -> dict:
        return {"prompt": [m.to_dict() for m in self.prompt], "chosen": self.chosen, "rejected": self.rejected}

    @classmethod
    def from_dict(cls, d) -> "PreferencePair":
        return cls(tuple(Message.from_dict(m) for m in d["prompt"]), d["chosen"], d["rejected"])


def build_sft_records(
    samples: Sequence[Sample],
    variant: SftVariant = SftVariant.LABEL_ONLY,
    justifications: Mapping[str, str] | None = None,
    template: TemplateSet | None = None,
) -> list[SftRecord]:
    """One record per training sample.

    Label-only records pair the direct prompt with the bare digit; records with
    justifications pair the justify-first prompt with ``"<justification>\\n<digit>"``.
    """
    if not samples:
        raise TrainsetError("cannot build SFT records from an empty split")
    template = template or TemplateSet.default()
    if variant == SftVariant.LABEL_ONLY:
        return [
            SftRecord(tuple(render_prompt(PromptStyle.DIRECT, s.text, template)), str(s.gold))
            for s in samples
        ]

    justifications = justifications or {}
    missing = [s.id for s in samples if not (justifications.get(s.id) or "").strip()]
    if missing:
        raise TrainsetError(f"missing justification for {len(missing)} sample(s): {', '.join(missing)}")
    out = []
    for s in samples:
        completion = f"{justifications[s.id].strip()}\n{s.gold}"
        if parse_output(completion, PromptStyle.JUSTIFY).label != s.gold:
            raise TrainsetError(f"completion for {s.id} does not parse back to its gold label")
        out.append(SftRecord(tuple(render_prompt(PromptStyle.JUSTIFY, s.text, template)), completion))
    return out


def hardest_negative(dist: ClassDistribution, gold: int) -> int:
    """Most probable incorrect class, ties to the lowest code."""
    return max((c for c in range(3) if c != gold), key=lambda c: (dist.p[c], -c))


@dataclass
class MiningResult:
    pairs: list[PreferencePair] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)


def mine_dpo_pairs(
    records: Iterable[InferenceRecord],
    samples: Mapping[str, Sample],
    template: TemplateSet | None = None,
) -> MiningResult:
    """Chosen = gold digit, rejected = highest-probability wrong class, for every record.

    Records without a class distribution are skipped and reported.
    """
    template = template or TemplateSet.default()
    result = MiningResult()
    for r in records:
        if r.sample_id not in samples:
            raise TrainsetError(f"record {r.sample_id} has no matching sample")
        if r.distribution is None:
            result.skipped.append(r.sample_id)
            continue
        s = samples[r.sample_id]
        prompt = tuple(render_prompt(PromptStyle.DIRECT, s.text, template))
        result.pairs.append(PreferencePair(prompt, str(s.gold), str(hardest_negative(r.distribution, s.gold))))
    if result.skipped:
        log.warning("skipped %d record(s) without a class distribution", len(result.skipped))
    return result


SCHEMAS = {"sft": SftRecord, "dpo": PreferencePair}


def write_jsonl(items: Iterable[SftRecord | PreferencePair], path: str | Path, schema: str) -> int:
    cls = SCHEMAS[schema]
    n = 0
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for item in items:
            if not isinstance(item, cls):
                raise TypeError(f"{schema} schema expects {cls.__name__}, got {type(item).__name__}")
            fh.write(json.dumps(item.to_dict(), ensure_ascii=False) + "\n")
            n += 1
    return n


def read_jsonl(path: str | Path, schema: str) -> list:
    cls = SCHEMAS[schema]
    with Path(path).open(encoding="utf-8") as fh:
        return [cls.from_dict(json.loads(line)) for line in fh if line.strip()]


def write_manifest(path: str | Path, schema: str, count: int, **provenance) -> Path:
    """Sidecar ``<file>.manifest.json`` naming schema version and provenance."""
    path = Path(path)
    side = path.with_name(path.name + ".manifest.json")
    doc = {"schema": schema, "schema_version": SCHEMA_VERSION, "count": count, **provenance}
    side.write_text(json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
    return side
