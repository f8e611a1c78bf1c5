import json
import logging

import httpx
import pytest

from xspeech.corpus import Sample
from xspeech.llm_client import (
    AuthError,
    BatchAborted,
    DecodingParams,
    HTTPStatusError,
    LLMClient,
    ModelEndpoint,
    ResponseCache,
    RetryPolicy,
    TransportError,
    fingerprint,
    request_body,
    run_batch,
)
from xspeech.promptkit import Message, PromptStyle

MSGS = [Message("system", "sys"), Message("user", "Text:\nhello\n\nAnswer.")]
LOGPROBS = {"0": -0.1, "1": -2.5, "2": -4.0}


def endpoint(server, model="mock-a", **params):
    return ModelEndpoint(model, server.base_url, DecodingParams(**params))


def test_scripted_answer_with_logprobs(serve, client):
    server = serve({"models": {"mock-a": {"default": {"content": "0", "logprobs": LOGPROBS}}}})
    resp = client.complete(endpoint(server), MSGS)
    assert resp.text == "0"
    assert len(resp.token_logprobs) == 1
    tl = resp.token_logprobs[0]
    assert tl.token == "0" and tl.logprob == -0.1
    assert [a[0] for a in tl.alternatives] == ["0", "1", "2"]
    assert resp.attempts == 1
    assert resp.usage["completion_tokens"] == 1


def test_top_k_truncation_and_no_logprobs(serve, client):
    server = serve({"models": {"mock-a": {"default": {"content": "1", "logprobs": LOGPROBS}}}})
    with pytest.raises(ValueError):
        endpoint(server, top_logprobs=2)
    resp = client.complete(endpoint(server, logprobs=False), MSGS)
    assert resp.text == "1" and resp.token_logprobs is None


def test_retry_then_success(serve, client):
    server = serve({"models": {"mock-a": {"rules": [
        {"contains": "hello", "fail_status": 429, "fail_times": 2, "content": "2", "logprobs": LOGPROBS}]}}})
    resp = client.complete(endpoint(server), MSGS)
    assert resp.text == "2"
    assert resp.attempts == 3
    assert server.stats.requests == 3
    assert len(client.delays) == 2


def test_retry_after_header_honoured(serve, client):
    server = serve({"models": {"mock-a": {"rules": [
        {"contains": "hello", "fail_status": 503, "fail_times": 1, "retry_after": 0.005, "content": "0"}]}}})
    client.complete(endpoint(server), MSGS)
    assert client.delays == [0.005]


def test_auth_error_fails_fast(serve, client):
    server = serve({"api_key": "secret", "models": {"mock-a": {"default": {"content": "0"}}}})
    with pytest.raises(AuthError) as info:
        client.complete(endpoint(server), MSGS)
    assert info.value.status == 401
    assert server.stats.requests == 1 and client.delays == []


def test_bearer_from_env(serve, client, monkeypatch):
    server = serve({"api_key": "secret", "models": {"mock-a": {"default": {"content": "0"}}}})
    monkeypatch.setenv("XSPEECH_API_KEY", "secret")
    assert client.complete(endpoint(server), MSGS).text == "0"
    override = ModelEndpoint("mock-a", server.base_url, api_key="wrong")
    with pytest.raises(AuthError):
        client.complete(override, MSGS)


def test_permanent_error_carries_body(serve, client):
    server = serve({"models": {"mock-a": {}}})
    with pytest.raises(HTTPStatusError) as info:
        client.complete(endpoint(server, model="other"), MSGS)
    assert info.value.status == 404 and "unknown model" in info.value.body


def test_retries_exhausted(serve, client):
    server = serve({"models": {"mock-a": {"rules": [{"contains": "hello", "fail_status": 500}]}}})
    with pytest.raises(TransportError) as info:
        client.complete(endpoint(server), MSGS)
    assert info.value.attempts == 5
    assert server.stats.requests == 5


def test_transport_failure_is_retried():
    calls = []

    def handler(request):
        calls.append(request)
        if len(calls) == 1:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json={"choices": [{"message": {"content": "1"}}]})

    c = LLMClient(RetryPolicy(base_delay=0), http=httpx.Client(transport=httpx.MockTransport(handler)),
                  sleep=lambda s: None)
    ep = ModelEndpoint("m", "http://example.invalid", DecodingParams(logprobs=False))
    resp = c.complete(ep, MSGS)
    assert resp.attempts == 2 and resp.text == "1"
    body = json.loads(calls[0].content)
    assert calls[0].url == "http://example.invalid/v1/chat/completions"
    assert body == {"model": "m", "messages": [m.to_dict() for m in MSGS], "temperature": 0.0, "max_tokens": 4}


def test_request_body_wire_fields():
    ep = ModelEndpoint("m", "http://x", DecodingParams(temperature=0.0, max_tokens=256, top_logprobs=20))
    body = request_body(ep, MSGS)
    assert body["logprobs"] is True and body["top_logprobs"] == 20 and body["max_tokens"] == 256


def test_retry_policy_backoff():
    p = RetryPolicy(base_delay=1, max_delay=60, jitter=0)
    assert [p.delay(a) for a in (1, 2, 3, 8)] == [1, 2, 4, 60]
    assert p.delay(1, retry_after=120) == 60


class TestFingerprint:
    def test_stable(self):
        ep = ModelEndpoint("m", "http://a")
        assert fingerprint(ep, MSGS) == fingerprint(ModelEndpoint("m", "http://b"), list(MSGS))

    @pytest.mark.parametrize(
        "other",
        [
            ModelEndpoint("m2", "http://a"),
            ModelEndpoint("m", "http://a", DecodingParams(temperature=0.7)),
            ModelEndpoint("m", "http://a", DecodingParams(max_tokens=5)),
            ModelEndpoint("m", "http://a", DecodingParams(top_logprobs=5)),
            ModelEndpoint("m", "http://a", DecodingParams(logprobs=False)),
        ],
    )
    def test_any_change_changes_it(self, other):
        assert fingerprint(ModelEndpoint("m", "http://a"), MSGS) != fingerprint(other, MSGS)

    def test_messages_matter(self):
        ep = ModelEndpoint("m", "http://a")
        assert fingerprint(ep, MSGS) != fingerprint(ep, MSGS[:1])


class TestCache:
    def test_hit_skips_network(self, serve, client, tmp_path):
        server = serve({"models": {"mock-a": {"default": {"content": "0", "logprobs": LOGPROBS}}}})
        cache = ResponseCache(tmp_path)
        first = client.cached_complete(cache, endpoint(server), MSGS)
        second = client.cached_complete(cache, endpoint(server), MSGS)
        assert server.stats.requests == 1
        assert first.to_dict() == second.to_dict()
        assert list(tmp_path.glob("*.json")) == [tmp_path / f"{first.fingerprint}.json"]

    def test_params_distinguish_entries(self, serve, client, tmp_path):
        server = serve({"models": {"mock-a": {"default": {"content": "0"}}}})
        cache = ResponseCache(tmp_path)
        client.cached_complete(cache, endpoint(server, temperature=0.0), MSGS)
        client.cached_complete(cache, endpoint(server, temperature=0.5), MSGS)
        assert server.stats.requests == 2

    def test_corrupt_entry_is_refetched(self, serve, client, tmp_path, caplog):
        server = serve({"models": {"mock-a": {"default": {"content": "0", "logprobs": LOGPROBS}}}})
        cache = ResponseCache(tmp_path)
        resp = client.cached_complete(cache, endpoint(server), MSGS)
        path = cache.path(resp.fingerprint)
        good = path.read_bytes()
        path.write_bytes(good[: len(good) // 2])
        with caplog.at_level(logging.WARNING):
            again = client.cached_complete(cache, endpoint(server), MSGS)
        assert "corrupt cache entry" in caplog.text
        assert again.text == "0" and server.stats.requests == 2
        assert path.read_bytes() == good


def samples(n):
    return [Sample.make(f"post number {i:02d} end", i % 3) for i in range(n)]


class TestRunBatch:
    def script(self, **extra):
        return {"latency_ms": 20, "models": {"mock-a": {"default": {"content": "1", "logprobs": LOGPROBS}, **extra}}}

    def test_order_preserved(self, serve, client):
        server = serve({"latency_ms": 5, "models": {"mock-a": {"rules": [
            {"contains": f"number {i:02d} ", "content": str(i % 3), "logprobs": LOGPROBS} for i in range(30)]}}})
        xs = samples(30)
        recs = run_batch(client, endpoint(server), xs, PromptStyle.DIRECT, limit=8)
        assert [r.sample_id for r in recs] == [s.id for s in xs]
        assert [r.label for r in recs] == [i % 3 for i in range(30)]
        assert all(r.distribution is not None for r in recs)

    def test_limit_one_is_sequential(self, serve, client):
        server = serve(self.script())
        xs = samples(6)
        run_batch(client, endpoint(server), xs, PromptStyle.DIRECT, limit=1)
        assert server.stats.max_in_flight == 1
        assert server.stats.order == [f"Text:\n{s.text}\n\nAnswer with a single digit (0, 1 or 2) and nothing else."
                                      for s in xs]

    @pytest.mark.parametrize("limit", [2, 4])
    def test_in_flight_bound(self, serve, client, limit):
        server = serve(self.script())
        run_batch(client, endpoint(server), samples(16), PromptStyle.DIRECT, limit=limit)
        assert 1 < server.stats.max_in_flight <= limit

    def test_hard_failure_is_recorded(self, serve, client):
        server = serve(self.script(rules=[{"contains": "number 07 ", "fail_status": 500}]))
        recs = run_batch(client, endpoint(server), samples(30), PromptStyle.DIRECT, limit=4)
        assert recs[7].label is None and "5 attempts" in recs[7].error
        assert sum(r.label is not None for r in recs) == 29

    def test_abort_above_threshold(self, serve, client):
        server = serve(self.script(rules=[{"contains": "number 0", "fail_status": 400}]))
        with pytest.raises(BatchAborted, match="10/12"):
            run_batch(client, endpoint(server), samples(12), PromptStyle.DIRECT, limit=4, max_failure_rate=0.5)

    def test_justify_style_extracts_last_digit(self, serve, client):
        server = serve({"models": {"mock-a": {"default": {
            "content": "Mentions 2 groups but urges violence. Label: 2",
            "logprobs": {"0": -3.0, "1": -2.0, "2": -0.2}}}}})
        (rec,) = run_batch(client, endpoint(server, max_tokens=256), samples(1), PromptStyle.JUSTIFY)
        assert rec.label == 2
        assert rec.justification == "Mentions 2 groups but urges violence."
        assert rec.distribution.p[2] > 0.7

    def test_missing_logprob_digit_keeps_label(self, serve, client):
        server = serve({"models": {"mock-a": {"default": {"content": "0", "logprobs": {"zero": -0.1}}}}})
        (rec,) = run_batch(client, endpoint(server), samples(1), PromptStyle.DIRECT)
        assert rec.label == 0 and rec.distribution is None and rec.error.startswith("extraction")

    def test_cached_batch_is_identical_and_offline(self, serve, client, tmp_path):
        server = serve(self.script())
        cache = ResponseCache(tmp_path)
        xs = samples(10)
        first = run_batch(client, endpoint(server), xs, PromptStyle.DIRECT, limit=3, cache=cache)
        server.stats.reset()
        second = run_batch(client, endpoint(server), xs, PromptStyle.DIRECT, limit=3, cache=cache)
        assert server.stats.requests == 0
        assert [r.to_dict() for r in first] == [r.to_dict() for r in second]

    def test_bad_limit(self, client):
        with pytest.raises(ValueError):
            run_batch(client, ModelEndpoint("m", "http://x"), [], PromptStyle.DIRECT, limit=0)
