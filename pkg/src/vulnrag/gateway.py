"""Provider-agnostic chat completion and text embedding.

Backends:
- OpenAIChatBackend / OpenAIEmbeddingBackend: any OpenAI-compatible REST server
- ScriptedChatBackend: deterministic mock keyed by request fingerprint, with
  optional rule callbacks for fixture-driven end-to-end runs
- HashEmbeddingBackend: deterministic hash-seeded vectors for offline runs

The gateway wraps a backend pair with local context-window checks, refusal
detection, shared rate limiting, and a record/replay transcript so a whole
run can be reproduced byte-for-byte.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import requests

from .errors import (
    ContextOverflow,
    EmptyInput,
    NoScript,
    TranscriptMissing,
    Upstream,
)

logger = logging.getLogger(__name__)

LLM_API_KEY_ENV = "LLM_API_KEY"

DEFAULT_REFUSAL_PATTERNS = (
    "I cannot provide information on how",
    "I can't assist",
)


@dataclass(frozen=True)
class ChatRequest:
    """One chat completion request; role labels the pipeline stage."""

    system: str
    user: str
    model_id: str
    temperature: float = 0.0
    max_output_tokens: int = 2048
    role: str = "chat"
    want_logprobs: bool = False

    def __post_init__(self):
        if not self.user.strip():
            raise EmptyInput("chat request user content is empty")
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")

    @property
    def prompt_text(self) -> str:
        return self.system + "\n\n" + self.user if self.system else self.user


@dataclass
class TokenUsage:
    prompt_tokens: int = 0
    completion_tokens: int = 0


@dataclass
class ChatResponse:
    text: str
    token_usage: TokenUsage = field(default_factory=TokenUsage)
    token_logprobs: list[float] | None = None


@dataclass
class EmbeddingVector:
    values: np.ndarray
    model_id: str

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("embedding must be a nonempty 1-D vector")
        if not np.any(self.values):
            raise ValueError("embedding is all-zero")

    @property
    def dim(self) -> int:
        return int(self.values.size)


def chat_fingerprint(role: str, model_id: str, prompt_text: str) -> str:
    """Stable hash of (role, model_id, full prompt); any prompt edit changes it."""
    h = hashlib.sha256()
    for part in ("chat", role, model_id, prompt_text):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def embed_fingerprint(model_id: str, text: str) -> str:
    h = hashlib.sha256()
    for part in ("embed", model_id, text):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


class OpenAIChatBackend:
    """POST {base_url}/v1/chat/completions against any compatible server."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        timeout: float = 120.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(LLM_API_KEY_ENV)
        self.timeout = timeout
        self.session = session or requests.Session()

    def complete(self, req: ChatRequest) -> ChatResponse:
        payload: dict = {
            "model": req.model_id,
            "messages": (
                [{"role": "system", "content": req.system}] if req.system else []
            )
            + [{"role": "user", "content": req.user}],
            "temperature": req.temperature,
            "max_tokens": req.max_output_tokens,
        }
        if req.want_logprobs:
            payload["logprobs"] = True
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                self.base_url + "/v1/chat/completions",
                json=payload,
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise Upstream(f"chat request failed: {exc}") from exc
        if resp.status_code != 200:
            raise Upstream(f"chat endpoint returned HTTP {resp.status_code}: {resp.text[:200]}")
        try:
            data = resp.json()
            choice = data["choices"][0]
            text = choice["message"]["content"] or ""
            usage = data.get("usage", {})
            logprobs = None
            lp = choice.get("logprobs")
            if lp and lp.get("content"):
                logprobs = [t.get("logprob", 0.0) for t in lp["content"]]
            return ChatResponse(
                text=text,
                token_usage=TokenUsage(
                    prompt_tokens=int(usage.get("prompt_tokens", 0)),
                    completion_tokens=int(usage.get("completion_tokens", 0)),
                ),
                token_logprobs=logprobs,
            )
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise Upstream(f"unexpected chat payload: {exc}") from exc


class ScriptedChatBackend:
    """Mock chat backend.

    Exact entries map a request fingerprint to a response; rules are callables
    tried in order that may answer any request. Requests nothing matches raise
    NoScript so missing fixtures fail loudly.
    """

    def __init__(self):
        self._scripts: dict[str, ChatResponse] = {}
        self._rules: list[Callable[[ChatRequest], ChatResponse | str | None]] = []

    def script(self, fingerprint: str, response: ChatResponse | str) -> None:
        if isinstance(response, str):
            response = ChatResponse(text=response)
        self._scripts[fingerprint] = response

    def script_request(self, req: ChatRequest, response: ChatResponse | str) -> None:
        self.script(chat_fingerprint(req.role, req.model_id, req.prompt_text), response)

    def add_rule(self, rule: Callable[[ChatRequest], ChatResponse | str | None]) -> None:
        self._rules.append(rule)

    def complete(self, req: ChatRequest) -> ChatResponse:
        fp = chat_fingerprint(req.role, req.model_id, req.prompt_text)
        if fp in self._scripts:
            return self._scripts[fp]
        for rule in self._rules:
            out = rule(req)
            if out is not None:
                return ChatResponse(text=out) if isinstance(out, str) else out
        raise NoScript(f"no scripted response for fingerprint {fp[:12]}… (role={req.role})")


class OpenAIEmbeddingBackend:
    """POST {base_url}/v1/embeddings against any compatible server."""

    def __init__(
        self,
        base_url: str,
        api_key: str | None = None,
        *,
        timeout: float = 60.0,
        session: requests.Session | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key if api_key is not None else os.environ.get(LLM_API_KEY_ENV)
        self.timeout = timeout
        self.session = session or requests.Session()

    def embed(self, text: str, model_id: str) -> list[float]:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            resp = self.session.post(
                self.base_url + "/v1/embeddings",
                json={"model": model_id, "input": text},
                headers=headers,
                timeout=self.timeout,
            )
        except requests.RequestException as exc:
            raise Upstream(f"embedding request failed: {exc}") from exc
        if resp.status_code != 200:
            raise Upstream(f"embedding endpoint returned HTTP {resp.status_code}")
        try:
            return [float(v) for v in resp.json()["data"][0]["embedding"]]
        except (KeyError, IndexError, TypeError, ValueError) as exc:
            raise Upstream(f"unexpected embedding payload: {exc}") from exc


class HashEmbeddingBackend:
    """Deterministic embeddings seeded from sha256(model_id, text).

    Vectors are platform-independent and stable across runs, which makes
    offline retrieval and replay byte-reproducible.
    """

    def __init__(self, dim: int = 64):
        self.dim = dim

    def embed(self, text: str, model_id: str) -> list[float]:
        digest = hashlib.sha256(f"{model_id}\x00{text}".encode("utf-8")).digest()
        seed = int.from_bytes(digest[:8], "big")
        rng = np.random.default_rng(seed)
        vec = rng.standard_normal(self.dim)
        return [float(v) for v in vec]


class Transcript:
    """Append-only JSONL of {kind, fingerprint, request, response} entries."""

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()

    def append(self, kind: str, fingerprint: str, request: dict, response: dict) -> None:
        line = json.dumps(
            {"kind": kind, "fingerprint": fingerprint, "request": request, "response": response},
            ensure_ascii=False,
        )
        with self._lock:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")

    @staticmethod
    def load(path: str) -> dict[tuple[str, str], dict]:
        entries: dict[tuple[str, str], dict] = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                obj = json.loads(line)
                entries[(obj["kind"], obj["fingerprint"])] = obj["response"]
        return entries


def _response_to_dict(resp: ChatResponse) -> dict:
    return {
        "text": resp.text,
        "token_usage": {
            "prompt_tokens": resp.token_usage.prompt_tokens,
            "completion_tokens": resp.token_usage.completion_tokens,
        },
        "token_logprobs": resp.token_logprobs,
    }


def _response_from_dict(d: dict) -> ChatResponse:
    usage = d.get("token_usage", {})
    return ChatResponse(
        text=d["text"],
        token_usage=TokenUsage(
            prompt_tokens=int(usage.get("prompt_tokens", 0)),
            completion_tokens=int(usage.get("completion_tokens", 0)),
        ),
        token_logprobs=d.get("token_logprobs"),
    )


class LlmGateway:
    """Shared front door for chat and embedding calls.

    mode: "off" (direct), "record" (direct + transcript append), or "replay"
    (serve exclusively from the transcript). Window checks run locally with a
    conservative chars-per-token estimate, before any network call.
    """

    def __init__(
        self,
        chat_backend=None,
        embedding_backend=None,
        *,
        chat_model: str = "gpt-4o-mini",
        embed_model: str = "multi-qa-mpnet-base-dot-v1",
        context_window_tokens: int = 128_000,
        embed_window_tokens: int = 512,
        chars_per_token: float = 3.0,
        refusal_patterns: tuple[str, ...] = DEFAULT_REFUSAL_PATTERNS,
        mode: str = "off",
        transcript_path: str | None = None,
        max_in_flight: int = 8,
        min_request_interval: float = 0.0,
    ):
        if mode not in ("off", "record", "replay"):
            raise ValueError(f"unknown gateway mode: {mode}")
        if mode in ("record", "replay") and not transcript_path:
            raise ValueError(f"gateway mode {mode!r} needs a transcript_path")
        self.chat_backend = chat_backend
        self.embedding_backend = embedding_backend
        self.chat_model = chat_model
        self.embed_model = embed_model
        self.context_window_tokens = context_window_tokens
        self.embed_window_tokens = embed_window_tokens
        self.chars_per_token = chars_per_token
        self.refusal_patterns = tuple(refusal_patterns)
        self.mode = mode
        self.transcript_path = transcript_path
        self._transcript = Transcript(transcript_path) if mode == "record" else None
        self._replay: dict[tuple[str, str], dict] | None = None
        if mode == "replay":
            if not os.path.exists(transcript_path):
                raise TranscriptMissing(f"transcript not found: {transcript_path}")
            self._replay = Transcript.load(transcript_path)
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self.min_request_interval = min_request_interval
        self._pace_lock = threading.Lock()
        self._last_call = 0.0
        self._stats_lock = threading.Lock()
        self.chat_calls = 0
        self.embed_calls = 0

    # -- local token accounting ------------------------------------------

    def estimate_tokens(self, text: str) -> int:
        """Conservative token estimate: may overestimate, never underestimates."""
        return math.ceil(len(text) / self.chars_per_token) if text else 0

    def context_budget_chars(self, overhead_tokens: int = 0, output_tokens: int = 0) -> int:
        """Largest content size (chars) that safely fits the chat window."""
        tokens = self.context_window_tokens - overhead_tokens - output_tokens
        return max(0, int(tokens * self.chars_per_token))

    # -- pacing ------------------------------------------------------------

    def _pace(self):
        if self.min_request_interval <= 0:
            return
        with self._pace_lock:
            wait = self._last_call + self.min_request_interval - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            self._last_call = time.monotonic()

    # -- chat ----------------------------------------------------------------

    def complete(self, req: ChatRequest) -> ChatResponse:
        prompt_tokens = self.estimate_tokens(req.prompt_text)
        if prompt_tokens + req.max_output_tokens > self.context_window_tokens:
            raise ContextOverflow(
                f"prompt of ~{prompt_tokens} tokens exceeds the "
                f"{self.context_window_tokens}-token window"
            )
        fp = chat_fingerprint(req.role, req.model_id, req.prompt_text)
        with self._stats_lock:
            self.chat_calls += 1
        if self._replay is not None:
            try:
                return _response_from_dict(self._replay[("chat", fp)])
            except KeyError:
                raise TranscriptMissing(f"no transcript entry for chat {fp[:12]}…") from None
        if self.chat_backend is None:
            raise Upstream("no chat backend configured")
        with self._slots:
            self._pace()
            resp = self.chat_backend.complete(req)
        if self._transcript is not None:
            self._transcript.append(
                "chat",
                fp,
                {
                    "role": req.role,
                    "model_id": req.model_id,
                    "system": req.system,
                    "user": req.user,
                    "temperature": req.temperature,
                },
                _response_to_dict(resp),
            )
        return resp

    # -- embeddings ---------------------------------------------------------

    def embed(self, text: str, model_id: str | None = None) -> EmbeddingVector:
        if not text or not text.strip():
            raise EmptyInput("cannot embed empty text")
        model_id = model_id or self.embed_model
        text, _ = self.truncate_for_embedding(text)
        fp = embed_fingerprint(model_id, text)
        with self._stats_lock:
            self.embed_calls += 1
        if self._replay is not None:
            try:
                entry = self._replay[("embed", fp)]
            except KeyError:
                raise TranscriptMissing(f"no transcript entry for embed {fp[:12]}…") from None
            return EmbeddingVector(values=np.array(entry["values"]), model_id=model_id)
        if self.embedding_backend is None:
            raise Upstream("no embedding backend configured")
        with self._slots:
            self._pace()
            values = self.embedding_backend.embed(text, model_id)
        vec = EmbeddingVector(values=np.array(values), model_id=model_id)
        if self._transcript is not None:
            self._transcript.append(
                "embed",
                fp,
                {"model_id": model_id, "text": text},
                {"values": [float(v) for v in vec.values]},
            )
        return vec

    def truncate_for_embedding(self, text: str) -> tuple[str, bool]:
        """Hard-truncate to the embedding window; returns (text, truncated?)."""
        budget = int(self.embed_window_tokens * self.chars_per_token)
        if len(text) > budget:
            return text[:budget], True
        return text, False

    # -- refusal detection ----------------------------------------------------

    def detect_refusal(self, text: str) -> bool:
        """True when text matches any refusal pattern; empty text counts as
        refusal since it carries no usable answer."""
        if not text or not text.strip():
            return True
        lowered = text.casefold()
        return any(p.casefold() in lowered for p in self.refusal_patterns)
