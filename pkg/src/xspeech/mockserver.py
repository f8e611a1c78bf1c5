"""Deterministic scripted stand-in for an OpenAI-compatible chat-completions server.

Script format (JSON)::

    {
      "latency_ms": 5,
      "api_key": null,
      "models": {
        "mock-a": {
          "default": {"content": "0", "logprobs": {"0": -0.1, "1": -2.5}},
          "rules": [
            {"contains": "some text", "content": "Because ...\\n2",
             "logprobs": {"0": -3.0, "1": -2.0, "2": -0.2}},
            {"contains": "flaky", "fail_status": 429, "fail_times": 2},
            {"contains": "broken", "fail_status": 500}
          ]
        }
      }
    }

The first rule whose ``contains`` occurs in the last user message wins. A
rule with ``fail_status`` fails ``fail_times`` times (forever when omitted)
before answering. Models without a matching rule or default answer with a
digit derived from a hash of the prompt.
"""

from __future__ import annotations

import asyncio
import hashlib
import json
import re
import socket
import threading
from pathlib import Path
from typing import Any, Optional

import uvicorn
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel

_TOKEN = re.compile(r"\s*\S+|\s+$")


class ChatMessage(BaseModel):
    role: str
    content: str


class ChatRequest(BaseModel):
    model: str
    messages: list[ChatMessage]
    temperature: float = 1.0
    max_tokens: Optional[int] = None
    logprobs: bool = False
    top_logprobs: Optional[int] = None


class MockStats:
    def __init__(self):
        self.reset()

    def reset(self):
        self.requests = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self.by_model: dict[str, int] = {}
        self.order: list[str] = []
        self.failures: dict[tuple[str, int], int] = {}

    def to_dict(self) -> dict:
        return {
            "requests": self.requests,
            "in_flight": self.in_flight,
            "max_in_flight": self.max_in_flight,
            "by_model": dict(self.by_model),
        }


def _hash_answer(model: str, text: str) -> dict:
    digit = int(hashlib.sha256(f"{model}\x00{text}".encode()).hexdigest(), 16) % 3
    lps = {str(c): (-0.2 if c == digit else -2.0 - c * 0.5) for c in range(3)}
    return {"content": str(digit), "logprobs": lps}


def _logprob_content(content: str, label_lps: dict[str, float], k: int) -> list[dict]:
    tokens = _TOKEN.findall(content) or [content]
    label_idx = None
    for i, tok in enumerate(tokens):
        if tok.strip() in ("0", "1", "2"):
            label_idx = i
    out = []
    for i, tok in enumerate(tokens):
        if i == label_idx and label_lps:
            prefix = tok[: len(tok) - len(tok.lstrip())]
            alts = sorted(
                ({"token": prefix + d, "logprob": float(lp)} for d, lp in label_lps.items()),
                key=lambda a: -a["logprob"],
            )[:k]
            own = float(label_lps.get(tok.strip(), alts[0]["logprob"] if alts else 0.0))
            out.append({"token": tok, "logprob": own, "top_logprobs": alts})
        else:
            out.append({"token": tok, "logprob": -0.01, "top_logprobs": [{"token": tok, "logprob": -0.01}][:k]})
    return out


def create_app(script: dict[str, Any]) -> FastAPI:
    app = FastAPI(title="xspeech mock LLM")
    stats = MockStats()
    app.state.stats = stats
    app.state.script = script
    latency = float(script.get("latency_ms", 0)) / 1000.0
    api_key = script.get("api_key")
    models = script.get("models", {})

    @app.get("/_mock/stats")
    async def get_stats():
        return stats.to_dict()

    @app.post("/_mock/reset")
    async def reset():
        stats.reset()
        return stats.to_dict()

    @app.post("/v1/chat/completions")
    async def chat(req: ChatRequest, request: Request):
        stats.requests += 1
        stats.by_model[req.model] = stats.by_model.get(req.model, 0) + 1
        stats.in_flight += 1
        stats.max_in_flight = max(stats.max_in_flight, stats.in_flight)
        try:
            if latency:
                await asyncio.sleep(latency)
            if api_key and request.headers.get("authorization") != f"Bearer {api_key}":
                return JSONResponse({"error": {"message": "invalid api key"}}, status_code=401)
            if models and req.model not in models:
                return JSONResponse({"error": {"message": f"unknown model {req.model}"}}, status_code=404)
            user = next((m.content for m in reversed(req.messages) if m.role == "user"), "")
            stats.order.append(user)
            spec = models.get(req.model, {})
            answer = None
            for i, rule in enumerate(spec.get("rules", [])):
                if rule.get("contains", "") in user:
                    status = rule.get("fail_status")
                    if status:
                        key = (req.model, i)
                        seen = stats.failures.get(key, 0)
                        times = rule.get("fail_times")
                        if times is None or seen < times:
                            stats.failures[key] = seen + 1
                            headers = {}
                            if "retry_after" in rule:
                                headers["Retry-After"] = str(rule["retry_after"])
                            return JSONResponse(
                                {"error": {"message": f"scripted failure {status}"}},
                                status_code=status,
                                headers=headers,
                            )
                    if "content" in rule:
                        answer = rule
                        break
            if answer is None:
                answer = spec.get("default") or _hash_answer(req.model, user)
            content = answer["content"]
            choice: dict[str, Any] = {
                "index": 0,
                "message": {"role": "assistant", "content": content},
                "finish_reason": "stop",
                "logprobs": None,
            }
            if req.logprobs:
                k = req.top_logprobs or 0
                choice["logprobs"] = {"content": _logprob_content(content, answer.get("logprobs") or {}, k)}
            n_completion = len(_TOKEN.findall(content))
            n_prompt = sum(len(m.content.split()) for m in req.messages)
            return {
                "id": "mock-" + hashlib.sha256(f"{req.model}\x00{user}".encode()).hexdigest()[:12],
                "object": "chat.completion",
                "model": req.model,
                "choices": [choice],
                "usage": {
                    "prompt_tokens": n_prompt,
                    "completion_tokens": n_completion,
                    "total_tokens": n_prompt + n_completion,
                },
            }
        finally:
            stats.in_flight -= 1

    return app


def load_script(path: str | Path) -> dict:
    return json.loads(Path(path).read_text(encoding="utf-8"))


class MockServer:
    """Run the mock app on a background thread (context manager)."""

    def __init__(self, script: dict, host: str = "127.0.0.1", port: int = 0):
        self.app = create_app(script)
        self.host = host
        self.port = port
        self._server: uvicorn.Server | None = None
        self._thread: threading.Thread | None = None

    @property
    def stats(self) -> MockStats:
        return self.app.state.stats

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "MockServer":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.host, self.port))
        self.port = sock.getsockname()[1]
        config = uvicorn.Config(self.app, log_level="warning", lifespan="off")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, kwargs={"sockets": [sock]}, daemon=True)
        self._thread.start()
        while not self._server.started:
            if not self._thread.is_alive():
                raise RuntimeError("mock server failed to start")
            threading.Event().wait(0.01)
        return self

    def stop(self) -> None:
        if self._server is not None:
            self._server.should_exit = True
            self._thread.join(timeout=5)

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()


def serve(script: dict, host: str = "127.0.0.1", port: int = 8000) -> None:
    uvicorn.run(create_app(script), host=host, port=port, log_level="info")
