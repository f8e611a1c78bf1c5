"""Inference records and the on-disk run artifact (manifest.json + records.jsonl)."""

from __future__ import annotations

import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .probability import ClassDistribution
from .promptkit import ParsedOutput

MANIFEST = "manifest.json"
RECORDS = "records.jsonl"
REPORT = "report.json"


@dataclass(frozen=True)
class InferenceRecord:
    sample_id: str
    raw_text: str
    label: int | None = None
    justification: str | None = None
    distribution: ClassDistribution | None = None
    fingerprint: str | None = None
    error: str | None = None

    def __post_init__(self):
        if self.distribution is not None and self.label is None:
            raise ValueError("a record with a distribution must carry a label")

    @property
    def parse_status(self) -> str:
        return "parsed" if self.label is not None else "unparsed"

    @property
    def parsed(self) -> ParsedOutput:
        return ParsedOutput(self.label, self.justification)

    def to_dict(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "raw_text": self.raw_text,
            "parse_status": self.parse_status,
            "label": self.label,
            "justification": self.justification,
            "distribution": self.distribution.to_list() if self.distribution else None,
            "fingerprint": self.fingerprint,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "InferenceRecord":
        dist = d.get("distribution")
        return cls(
            sample_id=d["sample_id"],
            raw_text=d.get("raw_text", ""),
            label=d.get("label"),
            justification=d.get("justification"),
            distribution=ClassDistribution.from_list(dist) if dist is not None else None,
            fingerprint=d.get("fingerprint"),
            error=d.get("error"),
        )


def dumps_line(obj) -> str:
    return json.dumps(obj, ensure_ascii=False) + "\n"


def write_records(records: Iterable[InferenceRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(dumps_line(r.to_dict()))


def read_records(path: str | Path) -> list[InferenceRecord]:
    with Path(path).open(encoding="utf-8") as fh:
        return [InferenceRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


def _timestamp() -> str:
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch else int(time.time())
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunArtifact:
    manifest: dict
    records: list[InferenceRecord] = field(default_factory=list)

    def predictions(self) -> dict[str, int | None]:
        return {r.sample_id: r.label for r in self.records}

    def distributions(self) -> dict[str, ClassDistribution | None]:
        return {r.sample_id: r.distribution for r in self.records}

    def save(self, run_dir: str | Path) -> Path:
        """Write the run; an existing identical manifest keeps its original timestamp."""
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        manifest = dict(self.manifest)
        manifest["n_records"] = len(self.records)
        old_path = run_dir / MANIFEST
        created = None
        if old_path.exists():
            try:
                old = json.loads(old_path.read_text(encoding="utf-8"))
                if {k: v for k, v in old.items() if k != "created"} == manifest:
                    created = old.get("created")
            except ValueError:
                pass
        manifest["created"] = created or _timestamp()
        self.manifest = manifest
        old_path.write_text(json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", encoding="utf-8")
        write_records(self.records, run_dir / RECORDS)
        return run_dir

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunArtifact":
        run_dir = Path(run_dir)
        manifest = json.loads((run_dir / MANIFEST).read_text(encoding="utf-8"))
        return cls(manifest, read_records(run_dir / RECORDS))
