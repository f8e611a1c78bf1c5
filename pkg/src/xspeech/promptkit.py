"""Prompt rendering for the two zero-shot styles and parsing of model answers."""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path

PLACEHOLDER = "{text}"


class PromptStyle(str, Enum):
    DIRECT = "direct"
    JUSTIFY = "justify"


class TemplateError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    role: str
    content: str

    def to_dict(self) -> dict:
        return {"role": self.role, "content": self.content}

    @classmethod
    def from_dict(cls, d) -> "Message":
        return cls(d["role"], d["content"])


@dataclass(frozen=True)
class TemplateSet:
    system: str
    user_direct: str
    user_justify: str

    def __post_init__(self):
        for key in ("user_direct", "user_justify"):
            n = getattr(self, key).count(PLACEHOLDER)
            if n != 1:
                raise TemplateError(f"template {key} must contain {PLACEHOLDER} exactly once (found {n})")
        if not self.system.strip():
            raise TemplateError("template system prompt is empty")

    @classmethod
    def from_dict(cls, d) -> "TemplateSet":
        try:
            return cls(d["system"], d["user_direct"], d["user_justify"])
        except KeyError as exc:
            raise TemplateError(f"template missing key {exc}") from None

    @classmethod
    def load(cls, path: str | Path) -> "TemplateSet":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    @classmethod
    def default(cls) -> "TemplateSet":
        raw = resources.files("xspeech").joinpath("templates/default.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(raw))

    def to_dict(self) -> dict:
        return {"system": self.system, "user_direct": self.user_direct, "user_justify": self.user_justify}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def render_prompt(style: PromptStyle, text: str, template: TemplateSet | None = None) -> list[Message]:
    if not text:
        raise ValueError("cannot render a prompt for empty text")
    template = template or TemplateSet.default()
    user = template.user_direct if style == PromptStyle.DIRECT else template.user_justify
    # split/join rather than str.format: sample text may contain braces
    head, tail = user.split(PLACEHOLDER)
    return [Message("system", template.system), Message("user", head + text + tail)]


def render_assistant_completion(label: int) -> str:
    return str(label)


@dataclass(frozen=True)
class ParsedOutput:
    label: int | None = None
    justification: str | None = None

    @property
    def parsed(self) -> bool:
        return self.label is not None

    @property
    def status(self) -> str:
        return "parsed" if self.parsed else "unparsed"


UNPARSED = ParsedOutput()

# 0/1/2 not adjacent to a letter or digit; underscore counts as a separator
STANDALONE_DIGIT = re.compile(r"(?<![^\W_])[012](?![^\W_])")
_TRIM = " \t\r\n.,;:!?\"'`*()[]{}<>"
_LABEL_CUE = re.compile(r"\b(?:final\s+)?(?:label|answer|class|category)\s*(?:is)?\s*[:=\-]?\s*$", re.I)


def parse_output(raw: str, style: PromptStyle) -> ParsedOutput:
    if raw is None:
        return UNPARSED
    if style == PromptStyle.DIRECT:
        core = raw.strip(_TRIM)
        if core in ("0", "1", "2"):
            return ParsedOutput(int(core))
        return UNPARSED

    last = None
    for last in STANDALONE_DIGIT.finditer(raw):
        pass
    if last is None:
        return UNPARSED
    before = raw[: last.start()].rstrip(_TRIM.replace(".", "").replace("!", "").replace("?", ""))
    before = _LABEL_CUE.sub("", before).strip(" \t\r\n*_#")
    return ParsedOutput(int(last.group()), before or None)
