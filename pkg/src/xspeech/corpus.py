"""Corpus ingest, deduplication, label codec and deterministic stratified splits."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Mapping, Sequence

CLASS_NAMES: tuple[str, ...] = ("derogatory", "exclusionary", "dangerous")

_LONG_FORMS = {
    "derogatory extreme speech": 0,
    "exclusionary extreme speech": 1,
    "dangerous speech": 2,
}


class CorpusError(ValueError):
    """Raised for malformed corpus files, labels or split configurations."""


def encode_label(name: str) -> int:
    try:
        return CLASS_NAMES.index(name)
    except ValueError:
        raise CorpusError(f"unknown class name: {name!r}") from None


def decode_label(code: int) -> str:
    if isinstance(code, bool) or not isinstance(code, int) or not 0 <= code < 3:
        raise CorpusError(f"class code out of range: {code!r}")
    return CLASS_NAMES[code]


def normalize_label(value: str) -> int:
    """Map a raw label cell (name, long form or digit code) onto a class code."""
    key = " ".join(str(value).strip().lower().replace("_", " ").split())
    if key in ("0", "1", "2"):
        return int(key)
    if key in CLASS_NAMES:
        return CLASS_NAMES.index(key)
    if key in _LONG_FORMS:
        return _LONG_FORMS[key]
    raise CorpusError(f"unknown label value: {value!r}")


def sample_id(text: str, gold: int) -> str:
    h = hashlib.blake2b(digest_size=8)
    h.update(text.encode("utf-8"))
    h.update(b"\x00")
    h.update(str(gold).encode("ascii"))
    return h.hexdigest()


@dataclass(frozen=True)
class Sample:
    id: str
    text: str
    gold: int

    @classmethod
    def make(cls, text: str, gold: int) -> "Sample":
        decode_label(gold)
        if not text:
            raise CorpusError("sample text must be non-empty")
        return cls(sample_id(text, gold), text, gold)

    @property
    def label_name(self) -> str:
        return CLASS_NAMES[self.gold]


@dataclass(frozen=True)
class ColumnSchema:
    text: str = "text"
    label: str = "label"


def load_corpus(path: str | Path, schema: ColumnSchema = ColumnSchema()) -> list[Sample]:
    """Read a CSV/TSV corpus with a header row.

    Row numbers in error messages count data rows from 1 (the header is not
    counted).
    """
    path = Path(path)
    delimiter = "\t" if path.suffix.lower() in (".tsv", ".tab") else ","
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    samples = []
    with fh:
        reader = csv.DictReader(fh, delimiter=delimiter)
        header = reader.fieldnames or []
        for col in (schema.text, schema.label):
            if col not in header:
                raise CorpusError(f"{path}: missing column {col!r} (have {header})")
        for row_no, row in enumerate(reader, start=1):
            text = row.get(schema.text) or ""
            if not text.strip():
                raise CorpusError(f"{path}: row {row_no}: empty text field")
            try:
                gold = normalize_label(row.get(schema.label) or "")
            except CorpusError as exc:
                raise CorpusError(f"{path}: row {row_no}: {exc}") from None
            samples.append(Sample.make(text, gold))
    return samples


def dedup(samples: Iterable[Sample]) -> list[Sample]:
    """Keep the first occurrence of each exact (text, gold) pair."""
    seen = set()
    out = []
    for s in samples:
        key = (s.text, s.gold)
        if key not in seen:
            seen.add(key)
            out.append(s)
    return out


class Split(str, Enum):
    TRAIN = "train"
    DEV = "dev"
    TEST = "test"


SPLITS: tuple[Split, ...] = (Split.TRAIN, Split.DEV, Split.TEST)

# Per-class (train, dev, test) counts of the reference 64/16/20 partition of the 4,933-sample benchmark corpus.
BENCHMARK_QUOTAS: dict[int, tuple[int, int, int]] = {
    0: (1438, 341, 411),
    1: (904, 214, 279),
    2: (814, 235, 297),
}


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[Fraction, Fraction, Fraction] = (
        Fraction(16, 25),
        Fraction(4, 25),
        Fraction(1, 5),
    )
    seed: int = 0
    quotas: Mapping[int, tuple[int, int, int]] | None = None

    def __post_init__(self):
        fr = tuple(_as_fraction(f) for f in self.fractions)
        if len(fr) != 3 or any(f < 0 for f in fr):
            raise CorpusError(f"fractions must be three non-negative numbers: {self.fractions}")
        if abs(float(sum(fr)) - 1.0) > 1e-12:
            raise CorpusError(f"fractions must sum to 1, got {float(sum(fr))!r}")
        object.__setattr__(self, "fractions", fr)
        if self.quotas is not None:
            quotas = {}
            for k, v in self.quotas.items():
                code = k if isinstance(k, int) else normalize_label(k)
                v = tuple(int(x) for x in v)
                if len(v) != 3 or any(x < 0 for x in v):
                    raise CorpusError(f"quota for {decode_label(code)} must be three non-negative counts")
                quotas[code] = v
            object.__setattr__(self, "quotas", quotas)

    def to_dict(self) -> dict:
        d: dict = {
            "fractions": [str(f) for f in self.fractions],
            "seed": self.seed,
        }
        if self.quotas is not None:
            d["quotas"] = {
                CLASS_NAMES[c]: dict(zip((s.value for s in SPLITS), self.quotas[c]))
                for c in sorted(self.quotas)
            }
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitConfig":
        kwargs: dict = {}
        if "fractions" in d:
            kwargs["fractions"] = tuple(d["fractions"])
        if "seed" in d:
            kwargs["seed"] = int(d["seed"])
        if d.get("quotas") is not None:
            quotas = {}
            for name, q in d["quotas"].items():
                if isinstance(q, Mapping):
                    try:
                        q = [q[s.value] for s in SPLITS]
                    except KeyError as exc:
                        raise CorpusError(f"quota for {name!r} lacks split {exc}") from None
                quotas[normalize_label(name)] = tuple(q)
            kwargs["quotas"] = quotas
        return cls(**kwargs)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


# --- seeded permutation -------------------------------------------------------
# SplitMix64 in counter mode: the i-th draw of a stream keyed by k is
# mix(k + (i + 1) * GOLDEN). Bounded draws use rejection sampling so the
# permutation is exact and platform independent.

_MASK = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15


def _mix64(z: int) -> int:
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


class CounterRng:
    def __init__(self, key: int):
        self.key = key & _MASK
        self.counter = 0

    def next_u64(self) -> int:
        self.counter += 1
        return _mix64((self.key + self.counter * _GOLDEN) & _MASK)

    def below(self, n: int) -> int:
        limit = ((1 << 64) // n) * n
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n


def class_stream_key(seed: int, code: int) -> int:
    return _mix64((seed + (code + 1) * _GOLDEN) & _MASK)


def seeded_shuffle(items: Sequence, key: int) -> list:
    """Fisher-Yates shuffle driven by a CounterRng stream."""
    out = list(items)
    rng = CounterRng(key)
    for i in range(len(out) - 1, 0, -1):
        j = rng.below(i + 1)
        out[i], out[j] = out[j], out[i]
    return out


def largest_remainder(n: int, fractions: Sequence[Fraction]) -> tuple[int, ...]:
    """Apportion n items by fractions; remainders go to the largest parts, ties to earlier splits."""
    shares = [f * n for f in fractions]
    counts = [int(s) for s in shares]  # floor, shares are non-negative
    left = n - sum(counts)
    order = sorted(range(len(shares)), key=lambda i: (-(shares[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return tuple(counts)


@dataclass
class SplitAssignment:
    """sample id -> split, in corpus order."""

    splits: dict[str, Split] = field(default_factory=dict)

    def __getitem__(self, sid: str) -> Split:
        return self.splits[sid]

    def __len__(self) -> int:
        return len(self.splits)

    def ids(self, split: Split) -> list[str]:
        return [sid for sid, s in self.splits.items() if s == split]

    def counts(self, samples: Sequence[Sample]) -> dict[int, tuple[int, int, int]]:
        tally = {c: [0, 0, 0] for c in range(3)}
        for s in samples:
            tally[s.gold][SPLITS.index(self.splits[s.id])] += 1
        return {c: tuple(v) for c, v in tally.items()}


def stratified_split(samples: Sequence[Sample], config: SplitConfig) -> SplitAssignment:
    by_class: dict[int, list[Sample]] = {0: [], 1: [], 2: []}
    seen: set[str] = set()
    for s in samples:
        if s.id in seen:
            raise CorpusError(f"duplicate sample id {s.id}; run dedup first")
        seen.add(s.id)
        by_class[s.gold].append(s)

    if config.quotas is not None:
        for code, members in by_class.items():
            quota = config.quotas.get(code, (0, 0, 0))
            if sum(quota) != len(members):
                raise CorpusError(
                    f"quota for {CLASS_NAMES[code]} sums to {sum(quota)} "
                    f"but the corpus has {len(members)} samples of that class"
                )

    nonempty = sum(1 for f in config.fractions if f > 0)
    chosen: dict[str, Split] = {}
    for code, members in by_class.items():
        if not members:
            continue
        if config.quotas is not None:
            counts = config.quotas[code]
        else:
            if len(members) < nonempty:
                raise CorpusError(
                    f"class {CLASS_NAMES[code]} has {len(members)} samples, fewer than "
                    f"the {nonempty} non-empty splits"
                )
            counts = largest_remainder(len(members), config.fractions)
        ordered = sorted(members, key=lambda s: s.id)
        shuffled = seeded_shuffle(ordered, class_stream_key(config.seed, code))
        pos = 0
        for split, k in zip(SPLITS, counts):
            for s in shuffled[pos : pos + k]:
                chosen[s.id] = split
            pos += k

    return SplitAssignment({s.id: chosen[s.id] for s in samples})


def write_assignment(
    assignment: SplitAssignment,
    samples: Sequence[Sample],
    csv_path: str | Path,
    config: SplitConfig,
) -> None:
    """Write ``sample_id,split,label`` rows plus a JSON sidecar echoing the config."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "split", "label"])
        for s in samples:
            w.writerow([s.id, assignment[s.id].value, s.gold])
    sidecar = csv_path.with_suffix(".json")
    sidecar.write_text(json.dumps(config.to_dict(), indent=2) + "\n", encoding="utf-8")


def read_assignment(csv_path: str | Path) -> tuple[SplitAssignment, dict[str, int]]:
    """Return the assignment and the gold labels travelling with it."""
    assignment = SplitAssignment()
    golds: dict[str, int] = {}
    with Path(csv_path).open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            assignment.splits[row["sample_id"]] = Split(row["split"])
            golds[row["sample_id"]] = int(row["label"])
    return assignment, golds


def write_samples(samples: Iterable[Sample], path: str | Path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "text", "label"])
        for s in samples:
            w.writerow([s.id, s.text, s.gold])


def read_samples(path: str | Path) -> list[Sample]:
    """Read a per-split sample file written by :func:`write_samples`."""
    out = []
    with Path(path).open(newline="", encoding="utf-8") as fh:
        for row_no, row in enumerate(csv.DictReader(fh), start=1):
            s = Sample.make(row["text"], normalize_label(row["label"]))
            if row.get("sample_id") and row["sample_id"] != s.id:
                raise CorpusError(f"{path}: row {row_no}: sample_id does not match content")
            out.append(s)
    return out
