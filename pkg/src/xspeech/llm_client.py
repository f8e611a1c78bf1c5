"""OpenAI-compatible chat-completions client with retries, an on-disk cache and batching."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import random
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import httpx

from .corpus import Sample
from .probability import ExtractionError, class_distribution, locate_label_position
from .promptkit import Message, PromptStyle, TemplateSet, parse_output, render_prompt
from .records import InferenceRecord

log = logging.getLogger(__name__)

API_KEY_ENV = "XSPEECH_API_KEY"
RETRYABLE = frozenset({429, 500, 502, 503, 504})


class LLMError(RuntimeError):
    pass


class HTTPStatusError(LLMError):
    """Non-retryable HTTP status; raised on the first occurrence."""

    def __init__(self, status: int, body: str):
        super().__init__(f"HTTP {status}: {body[:500]}")
        self.status = status
        self.body = body


class AuthError(HTTPStatusError):
    pass


class TransportError(LLMError):
    """Retries exhausted."""

    def __init__(self, attempts: int, last: str):
        super().__init__(f"request failed after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


class BatchAborted(LLMError):
    pass


@dataclass(frozen=True)
class DecodingParams:
    temperature: float = 0.0
    max_tokens: int = 4
    logprobs: bool = True
    top_logprobs: int = 20

    @classmethod
    def for_style(cls, style: PromptStyle, **overrides) -> "DecodingParams":
        base = cls(max_tokens=4 if style == PromptStyle.DIRECT else 256)
        return cls(**{**asdict(base), **overrides})


@dataclass(frozen=True)
class ModelEndpoint:
    model_id: str
    base_url: str
    params: DecodingParams = DecodingParams()
    api_key: str | None = field(default=None, repr=False)
    api_key_env: str = API_KEY_ENV
    timeout: float = 60.0

    def __post_init__(self):
        if self.params.logprobs and self.params.top_logprobs < 3:
            raise ValueError("top_logprobs must be at least 3 to recover all class probabilities")

    def resolve_key(self) -> str | None:
        return self.api_key or os.environ.get(self.api_key_env)

    @property
    def url(self) -> str:
        return self.base_url.rstrip("/") + "/v1/chat/completions"


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 5
    base_delay: float = 1.0
    max_delay: float = 60.0
    jitter: float = 0.1

    def delay(self, attempt: int, retry_after: float | None = None) -> float:
        if retry_after is not None:
            return min(retry_after, self.max_delay)
        d = min(self.base_delay * 2 ** (attempt - 1), self.max_delay)
        return d * (1 + random.uniform(0, self.jitter))


@dataclass(frozen=True)
class TokenLogprob:
    token: str
    logprob: float
    alternatives: tuple[tuple[str, float], ...] = ()

    def to_dict(self) -> dict:
        return {
            "token": self.token,
            "logprob": self.logprob,
            "top_logprobs": [{"token": t, "logprob": lp} for t, lp in self.alternatives],
        }

    @classmethod
    def from_dict(cls, d) -> "TokenLogprob":
        alts = [(a["token"], float(a["logprob"])) for a in d.get("top_logprobs") or []]
        alts.sort(key=lambda a: -a[1])
        return cls(d["token"], float(d["logprob"]), tuple(alts))


@dataclass(frozen=True)
class RawResponse:
    text: str
    token_logprobs: tuple[TokenLogprob, ...] | None
    usage: dict
    fingerprint: str
    attempts: int = 1

    def to_dict(self) -> dict:
        return {
            "fingerprint": self.fingerprint,
            "text": self.text,
            "token_logprobs": None if self.token_logprobs is None else [t.to_dict() for t in self.token_logprobs],
            "usage": self.usage,
        }

    @classmethod
    def from_dict(cls, d) -> "RawResponse":
        tl = d.get("token_logprobs")
        return cls(
            text=d["text"],
            token_logprobs=None if tl is None else tuple(TokenLogprob.from_dict(t) for t in tl),
            usage=dict(d.get("usage") or {}),
            fingerprint=d["fingerprint"],
        )


def request_body(endpoint: ModelEndpoint, messages: Sequence[Message]) -> dict:
    p = endpoint.params
    body = {
        "model": endpoint.model_id,
        "messages": [m.to_dict() for m in messages],
        "temperature": p.temperature,
        "max_tokens": p.max_tokens,
    }
    if p.logprobs:
        body["logprobs"] = True
        body["top_logprobs"] = p.top_logprobs
    return body


def fingerprint(endpoint: ModelEndpoint, messages: Sequence[Message]) -> str:
    canon = json.dumps(
        {
            "model": endpoint.model_id,
            "messages": [m.to_dict() for m in messages],
            "params": asdict(endpoint.params),
        },
        sort_keys=True,
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def _parse_completion(payload: dict, fp: str, attempts: int) -> RawResponse:
    try:
        choice = payload["choices"][0]
        text = choice["message"]["content"] or ""
    except (KeyError, IndexError, TypeError) as exc:
        raise LLMError(f"malformed completion payload: {exc!r}") from None
    content = (choice.get("logprobs") or {}).get("content")
    tl = None if content is None else tuple(TokenLogprob.from_dict(t) for t in content)
    return RawResponse(text, tl, dict(payload.get("usage") or {}), fp, attempts)


def _retry_after(resp: httpx.Response) -> float | None:
    value = resp.headers.get("retry-after")
    if value is None:
        return None
    try:
        return max(0.0, float(value))
    except ValueError:
        return None


class LLMClient:
    """Thread-safe wrapper around one httpx.Client."""

    def __init__(
        self,
        retry: RetryPolicy = RetryPolicy(),
        http: httpx.Client | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.retry = retry
        self.http = http or httpx.Client()
        self.sleep = sleep
        self.upstream_calls = 0
        self._lock = threading.Lock()

    def close(self):
        self.http.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def complete(self, endpoint: ModelEndpoint, messages: Sequence[Message]) -> RawResponse:
        fp = fingerprint(endpoint, messages)
        body = request_body(endpoint, messages)
        headers = {}
        key = endpoint.resolve_key()
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last = ""
        for attempt in range(1, self.retry.max_attempts + 1):
            with self._lock:
                self.upstream_calls += 1
            retry_after = None
            try:
                resp = self.http.post(endpoint.url, json=body, headers=headers, timeout=endpoint.timeout)
            except (httpx.TimeoutException, httpx.TransportError) as exc:
                last = f"{type(exc).__name__}: {exc}"
            else:
                if resp.status_code == 200:
                    return _parse_completion(resp.json(), fp, attempt)
                if resp.status_code in (401, 403):
                    raise AuthError(resp.status_code, resp.text)
                if resp.status_code not in RETRYABLE:
                    raise HTTPStatusError(resp.status_code, resp.text)
                last = f"HTTP {resp.status_code}"
                retry_after = _retry_after(resp)
            if attempt < self.retry.max_attempts:
                delay = self.retry.delay(attempt, retry_after)
                log.debug("attempt %d for %s failed (%s); sleeping %.2fs", attempt, endpoint.model_id, last, delay)
                self.sleep(delay)
        raise TransportError(self.retry.max_attempts, last)

    def cached_complete(
        self, cache: "ResponseCache | None", endpoint: ModelEndpoint, messages: Sequence[Message]
    ) -> RawResponse:
        if cache is None:
            return self.complete(endpoint, messages)
        fp = fingerprint(endpoint, messages)
        hit = cache.get(fp)
        if hit is not None:
            return hit
        resp = self.complete(endpoint, messages)
        cache.put(resp)
        return resp


class ResponseCache:
    """One JSON file per request fingerprint, written via temp file + rename."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, fp: str) -> Path:
        return self.root / f"{fp}.json"

    def get(self, fp: str) -> RawResponse | None:
        p = self.path(fp)
        try:
            raw = p.read_text(encoding="utf-8")
        except FileNotFoundError:
            return None
        try:
            resp = RawResponse.from_dict(json.loads(raw))
            if resp.fingerprint != fp:
                raise ValueError("fingerprint mismatch")
            return resp
        except (ValueError, KeyError, TypeError) as exc:
            log.warning("corrupt cache entry %s (%s); refetching", p.name, exc)
            return None

    def put(self, resp: RawResponse) -> None:
        data = json.dumps(resp.to_dict(), ensure_ascii=False, sort_keys=True)
        fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".json")
        try:
            with os.fdopen(fd, "w", encoding="utf-8") as fh:
                fh.write(data)
            os.replace(tmp, self.path(resp.fingerprint))
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise


def to_record(sample_id: str, resp: RawResponse, style: PromptStyle, want_distribution: bool) -> InferenceRecord:
    parsed = parse_output(resp.text, style)
    dist = None
    note = None
    if parsed.parsed and want_distribution:
        try:
            if not resp.token_logprobs:
                raise ExtractionError("response carries no logprobs")
            idx = locate_label_position(resp.token_logprobs, style, parsed.label)
            dist = class_distribution(resp.token_logprobs[idx].alternatives)
        except ExtractionError as exc:
            note = f"extraction: {exc}"
    return InferenceRecord(
        sample_id=sample_id,
        raw_text=resp.text,
        label=parsed.label,
        justification=parsed.justification,
        distribution=dist,
        fingerprint=resp.fingerprint,
        error=note,
    )


def run_batch(
    client: LLMClient,
    endpoint: ModelEndpoint,
    samples: Sequence[Sample],
    style: PromptStyle,
    limit: int = 8,
    cache: ResponseCache | None = None,
    template: TemplateSet | None = None,
    max_failure_rate: float = 0.5,
) -> list[InferenceRecord]:
    """Classify every sample; records come back in input order.

    A sample whose request fails after retries becomes an unparsed record with
    the error noted. If the share of such failures exceeds max_failure_rate
    the whole batch is aborted.
    """
    if limit < 1:
        raise ValueError("limit must be >= 1")
    template = template or TemplateSet.default()
    want_dist = endpoint.params.logprobs

    def one(sample: Sample) -> InferenceRecord:
        messages = render_prompt(style, sample.text, template)
        try:
            resp = client.cached_complete(cache, endpoint, messages)
        except LLMError as exc:
            log.warning("sample %s failed: %s", sample.id, exc)
            return InferenceRecord(sample.id, "", fingerprint=fingerprint(endpoint, messages), error=str(exc))
        return to_record(sample.id, resp, style, want_dist)

    with ThreadPoolExecutor(max_workers=limit) as pool:
        records = list(pool.map(one, samples))

    failed = [r for r in records if r.error and not r.error.startswith("extraction:")]
    if records and len(failed) / len(records) > max_failure_rate:
        raise BatchAborted(
            f"{len(failed)}/{len(records)} requests failed for {endpoint.model_id}; first error: {failed[0].error}"
        )
    return records
