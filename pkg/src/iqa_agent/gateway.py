"""Gateway to the vision-language model.

One request/response shape serves three interchangeable backends: a remote
HTTP endpoint speaking the de-facto chat-completions JSON dialect, a replay
store for deterministic offline runs, and a recording wrapper that fills
such a store from live traffic. Requests are keyed by a digest over their
canonical serialization, with attached images contributing their raster
digests, so the same logical request always replays the same response.
"""

from __future__ import annotations

import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import requests

from .images import ImageRef
from .model import QUALITY_LEVELS, QualityLevel, canonical_json, sha256_of_json
from .parsing import NoChoiceFoundError, parse_choice

LEVEL_CANDIDATES = ("excellent", "good", "fair", "poor", "bad")

_LEVEL_OPTIONS = ("A. Excellent", "B. Good", "C. Fair", "D. Poor", "E. Bad")
_LEVEL_BY_CANDIDATE = {label: level for label, level in zip(
    ("bad", "poor", "fair", "good", "excellent"), QUALITY_LEVELS)}
_CANDIDATE_BY_LETTER = dict(zip("ABCDE", LEVEL_CANDIDATES))

DEFAULT_SMOOTHING_EPSILON = 0.01


class GatewayError(RuntimeError):
    """Base class for backend failures."""


class GatewayTimeoutError(GatewayError):
    pass


class GatewayHttpError(GatewayError):
    def __init__(self, status: int, detail: str = ""):
        super().__init__(f"backend returned HTTP {status}: {detail}")
        self.status = status


class ReplayMissError(GatewayError):
    """The replay store has no entry for this request digest."""

    def __init__(self, digest: str, summary: str):
        super().__init__(f"no cassette entry for digest {digest[:16]}... ({summary})")
        self.digest = digest


class BackendUnsupportedError(GatewayError):
    """The backend cannot satisfy this request shape (e.g. logprobs)."""


@dataclass(frozen=True)
class ChatMessage:
    role: str
    text: str
    images: tuple = ()

    def __post_init__(self) -> None:
        if self.role not in ("system", "user"):
            raise ValueError(f"message role must be system or user, got {self.role!r}")
        if self.images and self.role != "user":
            raise ValueError("images may only be attached to user messages")


@dataclass(frozen=True)
class ChatRequest:
    messages: tuple
    temperature: float = 0.0
    max_tokens: int = 1024
    want_logprobs_for: Optional[tuple] = None

    def __post_init__(self) -> None:
        if not any(m.role == "user" for m in self.messages):
            raise ValueError("a chat request needs at least one user message")

    def summary(self) -> str:
        user_texts = [m.text for m in self.messages if m.role == "user"]
        image_count = sum(len(m.images) for m in self.messages)
        head = user_texts[-1][:120] if user_texts else ""
        return f"{head!r} (+{image_count} image(s))"


def request_digest(request: ChatRequest) -> str:
    """Stable content digest of a request.

    Canonical JSON with sorted keys; images contribute their raster digests
    rather than encoded bytes, so re-encoding a fixture image does not
    invalidate a cassette.
    """
    payload = {
        "messages": [
            {
                "role": m.role,
                "text": m.text,
                "images": [img.digest for img in m.images],
            }
            for m in request.messages
        ],
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
        "want_logprobs_for": (
            list(request.want_logprobs_for) if request.want_logprobs_for else None
        ),
    }
    return sha256_of_json(payload)


@dataclass(frozen=True)
class ChatResponse:
    text: str
    logprobs: Optional[dict] = None
    backend_id: str = "unknown"
    latency_ms: float = 0.0


class RemoteBackend:
    """Chat-completions style HTTP backend.

    Sends ``logprob_candidates`` alongside the request when candidate
    logprobs are wanted; servers that implement the extension answer with a
    ``candidate_logprobs`` map, all others simply ignore the field and the
    caller falls back to a constrained completion.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        api_key: Optional[str] = None,
        timeout_s: float = 60.0,
        max_retries: int = 2,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.max_retries = max_retries
        self.id = f"remote:{model}"

    def _payload(self, request: ChatRequest) -> dict:
        messages = []
        for m in request.messages:
            if m.images:
                content = [{"type": "text", "text": m.text}]
                for img in m.images:
                    content.append(
                        {"type": "image_url", "image_url": {"url": img.data_url()}}
                    )
                messages.append({"role": m.role, "content": content})
            else:
                messages.append({"role": m.role, "content": m.text})
        payload = {
            "model": self.model,
            "messages": messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.want_logprobs_for:
            payload["logprob_candidates"] = list(request.want_logprobs_for)
        return payload

    def chat(self, request: ChatRequest) -> ChatResponse:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        url = f"{self.endpoint}/chat/completions"
        body = self._payload(request)
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            started = time.monotonic()
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=self.timeout_s)
            except requests.exceptions.Timeout as exc:
                last_error = GatewayTimeoutError(f"backend timed out: {exc}")
            except requests.exceptions.RequestException as exc:
                last_error = GatewayError(f"cannot reach backend: {exc}")
            else:
                if resp.status_code >= 500:
                    last_error = GatewayHttpError(resp.status_code, resp.text[:200])
                elif resp.status_code != 200:
                    raise GatewayHttpError(resp.status_code, resp.text[:200])
                else:
                    elapsed_ms = (time.monotonic() - started) * 1000.0
                    return self._parse(resp, elapsed_ms)
            if attempt < self.max_retries:
                time.sleep(min(0.5 * (2 ** attempt), 4.0))
        raise last_error  # type: ignore[misc]

    def _parse(self, resp, elapsed_ms: float) -> ChatResponse:
        try:
            data = resp.json()
        except ValueError as exc:
            raise GatewayError(f"backend body is not JSON: {exc}") from exc
        try:
            choice = data["choices"][0]
            text = choice["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise GatewayError(f"unexpected backend response shape: {data!r}") from exc
        logprobs = None
        extension = data.get("candidate_logprobs") or choice.get("candidate_logprobs")
        if isinstance(extension, dict):
            logprobs = {str(k): float(v) for k, v in extension.items()}
        return ChatResponse(
            text=str(text), logprobs=logprobs, backend_id=self.id, latency_ms=elapsed_ms
        )


class ReplayBackend:
    """Replays recorded responses keyed by request digest. Read-only."""

    def __init__(self, cassette_path: str):
        self.cassette_path = cassette_path
        self.id = "replay"
        with open(cassette_path, "r", encoding="utf-8") as fh:
            entries = json.load(fh)
        if not isinstance(entries, list):
            raise ValueError(f"cassette must be a JSON array: {cassette_path}")
        self._by_digest = {}
        for entry in entries:
            self._by_digest[entry["digest"]] = entry

    def chat(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        entry = self._by_digest.get(digest)
        if entry is None:
            raise ReplayMissError(digest, request.summary())
        logprobs = entry.get("logprobs")
        if logprobs is not None:
            logprobs = {str(k): float(v) for k, v in logprobs.items()}
        return ChatResponse(
            text=entry["response_text"],
            logprobs=logprobs,
            backend_id=self.id,
            latency_ms=0.0,
        )


class RecordBackend:
    """Wraps a live backend and appends every new exchange to a cassette.

    Lookups hit the cassette first so re-runs of a recording session stay
    stable. Writes are serialized and atomic (write-temp-then-rename).
    """

    def __init__(self, inner, cassette_path: str):
        self.inner = inner
        self.cassette_path = cassette_path
        self.id = f"record({inner.id})"
        self._lock = threading.Lock()
        self._entries: list = []
        self._by_digest: dict = {}
        if os.path.exists(cassette_path):
            with open(cassette_path, "r", encoding="utf-8") as fh:
                self._entries = json.load(fh)
            self._by_digest = {e["digest"]: e for e in self._entries}

    def chat(self, request: ChatRequest) -> ChatResponse:
        digest = request_digest(request)
        with self._lock:
            entry = self._by_digest.get(digest)
        if entry is not None:
            return ChatResponse(
                text=entry["response_text"],
                logprobs=entry.get("logprobs"),
                backend_id=self.id,
                latency_ms=0.0,
            )
        response = self.inner.chat(request)
        entry = {
            "digest": digest,
            "request_summary": request.summary(),
            "response_text": response.text,
            "logprobs": response.logprobs,
        }
        with self._lock:
            if digest not in self._by_digest:
                self._entries.append(entry)
                self._by_digest[digest] = entry
                tmp = f"{self.cassette_path}.tmp"
                with open(tmp, "w", encoding="utf-8") as fh:
                    json.dump(self._entries, fh, indent=1)
                os.replace(tmp, self.cassette_path)
        return response


class VlmGateway:
    """Thin counting wrapper every pipeline component talks through."""

    def __init__(self, backend):
        self.backend = backend
        self.call_count = 0
        self._lock = threading.Lock()
        self._per_thread = threading.local()

    @property
    def thread_call_count(self) -> int:
        """Calls made from the current thread only.

        Stage-level call deltas must use this, not ``call_count``: when
        several assessments share one gateway across worker threads, the
        global counter mixes their calls together.
        """
        return getattr(self._per_thread, "count", 0)

    def chat(self, request: ChatRequest) -> ChatResponse:
        with self._lock:
            self.call_count += 1
        self._per_thread.count = self.thread_call_count + 1
        return self.backend.chat(request)


def build_gateway(
    backend_kind: str,
    endpoint: Optional[str] = None,
    model: Optional[str] = None,
    api_key: Optional[str] = None,
    cassette_path: Optional[str] = None,
    timeout_s: float = 60.0,
    max_retries: int = 2,
) -> VlmGateway:
    if backend_kind == "replay":
        if not cassette_path:
            raise ValueError("replay backend needs a cassette path")
        return VlmGateway(ReplayBackend(cassette_path))
    if backend_kind == "remote":
        if not endpoint or not model:
            raise ValueError("remote backend needs an endpoint and a model name")
        return VlmGateway(
            RemoteBackend(endpoint, model, api_key=api_key, timeout_s=timeout_s,
                          max_retries=max_retries)
        )
    if backend_kind == "record":
        if not endpoint or not model or not cassette_path:
            raise ValueError("record backend needs endpoint, model, and cassette path")
        inner = RemoteBackend(endpoint, model, api_key=api_key, timeout_s=timeout_s,
                              max_retries=max_retries)
        return VlmGateway(RecordBackend(inner, cassette_path))
    raise ValueError(f"unknown backend kind: {backend_kind!r}")


def level_logprobs(
    gateway: VlmGateway,
    messages: Sequence[ChatMessage],
    epsilon: float = DEFAULT_SMOOTHING_EPSILON,
) -> dict:
    """Log-probabilities over the five quality levels for a scoring prompt.

    Asks the backend for candidate logprobs directly; when the backend
    cannot provide them, falls back to one constrained-choice completion
    whose parsed letter becomes a smoothed one-hot distribution (the chosen
    level gets log(1 - 4*eps), the others log(eps)). Raises
    BackendUnsupportedError when neither path yields a usable answer.
    """
    request = ChatRequest(
        messages=tuple(messages),
        temperature=0.0,
        want_logprobs_for=LEVEL_CANDIDATES,
    )
    response = gateway.chat(request)
    if response.logprobs:
        table = {k.strip().lower(): float(v) for k, v in response.logprobs.items()}
        if all(c in table for c in LEVEL_CANDIDATES):
            return {
                _LEVEL_BY_CANDIDATE[c]: table[c] for c in LEVEL_CANDIDATES
            }
        raise BackendUnsupportedError(
            f"backend logprobs cover {sorted(table)} but all of {LEVEL_CANDIDATES} are required"
        )

    # Constrained-choice fallback: the same prompt, parsed for a letter.
    try:
        letter = parse_choice(response.text, _LEVEL_OPTIONS)
    except NoChoiceFoundError:
        fallback = gateway.chat(ChatRequest(messages=tuple(messages), temperature=0.0))
        try:
            letter = parse_choice(fallback.text, _LEVEL_OPTIONS)
        except NoChoiceFoundError as exc:
            raise BackendUnsupportedError(
                f"backend offers no level logprobs and no parseable level choice: {exc}"
            ) from exc
    chosen = _LEVEL_BY_CANDIDATE[_CANDIDATE_BY_LETTER[letter]]
    if not (0.0 < epsilon < 0.25):
        raise ValueError(f"epsilon must be in (0, 0.25), got {epsilon}")
    out = {}
    for level in QUALITY_LEVELS:
        p = (1.0 - 4.0 * epsilon) if level == chosen else epsilon
        out[level] = math.log(p)
    return out
