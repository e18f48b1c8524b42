"""Client side of the external tool adapter protocol.

Learned scoring tools run out of process behind a small adapter that
speaks one protocol over two transports:

- HTTP: ``GET {endpoint}/handshake`` and ``POST {endpoint}/score``
- stdio: newline-delimited JSON messages over a child process's pipes,
  with ``type`` fields mirroring the two HTTP routes

Both sides must present the protocol version in a handshake before any
scoring request. Every score response echoes the request_id it answers;
a mismatch is a protocol error, never silently accepted.
"""

from __future__ import annotations

import base64
import json
import queue
import subprocess
import threading
from dataclasses import dataclass, field
from typing import Optional, Sequence

import requests

PROTOCOL_VERSION = "agentiqa-adapter/1"


class AdapterError(RuntimeError):
    """Base class for adapter transport and protocol failures."""


class AdapterTimeoutError(AdapterError):
    """The adapter did not reply within the allotted time."""


class AdapterProtocolError(AdapterError):
    """The adapter replied with something outside the protocol."""


class AdapterUnavailableError(AdapterError):
    """The adapter could not be reached or started."""


@dataclass(frozen=True)
class AdapterScoreRequest:
    tool: str
    distorted: bytes
    distorted_format: str
    request_id: str
    reference: Optional[bytes] = None
    reference_format: Optional[str] = None
    metadata: Optional[dict] = None

    def to_wire_dict(self) -> dict:
        body = {
            "tool": self.tool,
            "distorted": {
                "data": base64.b64encode(self.distorted).decode("ascii"),
                "format": self.distorted_format,
            },
            "reference": None,
            "request_id": self.request_id,
        }
        if self.reference is not None:
            body["reference"] = {
                "data": base64.b64encode(self.reference).decode("ascii"),
                "format": self.reference_format or self.distorted_format,
            }
        if self.metadata is not None:
            body["metadata"] = self.metadata
        return body


@dataclass(frozen=True)
class AdapterScoreResponse:
    request_id: str
    status: str
    raw_score: Optional[float] = None
    message: str = ""

    @classmethod
    def from_wire_dict(cls, data: dict) -> "AdapterScoreResponse":
        if not isinstance(data, dict):
            raise AdapterProtocolError(f"score response must be an object, got {data!r}")
        if "request_id" not in data or "status" not in data:
            raise AdapterProtocolError(f"score response missing fields: {data!r}")
        status = data["status"]
        if status not in ("ok", "error"):
            raise AdapterProtocolError(f"score response status must be ok|error: {status!r}")
        raw = data.get("raw_score")
        if status == "ok":
            if raw is None or not isinstance(raw, (int, float)) or isinstance(raw, bool):
                raise AdapterProtocolError(f"ok response must carry a numeric raw_score: {data!r}")
            raw = float(raw)
        else:
            raw = None
        return cls(
            request_id=str(data["request_id"]),
            status=status,
            raw_score=raw,
            message=str(data.get("message", "")),
        )


def check_handshake(data: dict) -> dict:
    """Validate a handshake payload; returns it when acceptable."""
    if not isinstance(data, dict):
        raise AdapterProtocolError(f"handshake must be an object, got {data!r}")
    version = data.get("version")
    if version != PROTOCOL_VERSION:
        raise AdapterProtocolError(
            f"adapter speaks {version!r}, this client requires {PROTOCOL_VERSION!r}"
        )
    return data


class HttpAdapterClient:
    """Adapter client over HTTP. One instance may serve many requests."""

    def __init__(self, endpoint: str, timeout_ms: int = 30000):
        self.endpoint = endpoint.rstrip("/")
        self.timeout_s = timeout_ms / 1000.0
        self._handshaken = False

    def handshake(self) -> dict:
        try:
            resp = requests.get(f"{self.endpoint}/handshake", timeout=self.timeout_s)
        except requests.exceptions.Timeout as exc:
            raise AdapterTimeoutError(f"handshake timed out: {exc}") from exc
        except requests.exceptions.RequestException as exc:
            raise AdapterUnavailableError(f"cannot reach adapter: {exc}") from exc
        if resp.status_code != 200:
            raise AdapterProtocolError(f"handshake returned HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise AdapterProtocolError(f"handshake body is not JSON: {exc}") from exc
        result = check_handshake(data)
        self._handshaken = True
        return result

    def score(self, request: AdapterScoreRequest) -> AdapterScoreResponse:
        if not self._handshaken:
            self.handshake()
        try:
            resp = requests.post(
                f"{self.endpoint}/score",
                json=request.to_wire_dict(),
                timeout=self.timeout_s,
            )
        except requests.exceptions.Timeout as exc:
            raise AdapterTimeoutError(f"score request timed out: {exc}") from exc
        except requests.exceptions.RequestException as exc:
            raise AdapterUnavailableError(f"cannot reach adapter: {exc}") from exc
        if resp.status_code != 200:
            raise AdapterProtocolError(f"score returned HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError as exc:
            raise AdapterProtocolError(f"score body is not JSON: {exc}") from exc
        parsed = AdapterScoreResponse.from_wire_dict(data)
        if parsed.request_id != request.request_id:
            raise AdapterProtocolError(
                f"response echoes request_id {parsed.request_id!r}, "
                f"expected {request.request_id!r}"
            )
        return parsed

    def close(self) -> None:
        pass


class StdioAdapterClient:
    """Adapter client over a child process's stdin/stdout, one JSON per line.

    Requests are serialized: one in-flight request per process. A reader
    thread feeds a queue so replies can be awaited with a real timeout.
    """

    def __init__(self, command: Sequence[str], timeout_ms: int = 30000):
        self.command = list(command)
        self.timeout_s = timeout_ms / 1000.0
        self._proc: Optional[subprocess.Popen] = None
        self._lines: "queue.Queue[Optional[str]]" = queue.Queue()
        self._lock = threading.Lock()
        self._handshaken = False

    def _ensure_process(self) -> subprocess.Popen:
        if self._proc is not None and self._proc.poll() is None:
            return self._proc
        try:
            self._proc = subprocess.Popen(
                self.command,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                stderr=subprocess.DEVNULL,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise AdapterUnavailableError(f"cannot start adapter {self.command!r}: {exc}") from exc
        self._lines = queue.Queue()
        self._handshaken = False
        thread = threading.Thread(target=self._read_loop, args=(self._proc,), daemon=True)
        thread.start()
        return self._proc

    def _read_loop(self, proc: subprocess.Popen) -> None:
        assert proc.stdout is not None
        for line in proc.stdout:
            self._lines.put(line)
        self._lines.put(None)

    def _send(self, message: dict) -> None:
        proc = self._ensure_process()
        assert proc.stdin is not None
        try:
            proc.stdin.write(json.dumps(message) + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise AdapterUnavailableError(f"adapter process went away: {exc}") from exc

    def _receive(self) -> dict:
        try:
            line = self._lines.get(timeout=self.timeout_s)
        except queue.Empty:
            self.close()
            raise AdapterTimeoutError(
                f"no reply from adapter within {self.timeout_s:.1f}s"
            )
        if line is None:
            raise AdapterUnavailableError("adapter process closed its output")
        try:
            data = json.loads(line)
        except json.JSONDecodeError as exc:
            raise AdapterProtocolError(f"adapter emitted non-JSON line: {line[:120]!r}") from exc
        if not isinstance(data, dict):
            raise AdapterProtocolError(f"adapter message must be an object: {line[:120]!r}")
        return data

    def handshake(self) -> dict:
        with self._lock:
            return self._handshake_locked()

    def _handshake_locked(self) -> dict:
        self._ensure_process()
        self._send({"type": "handshake", "version": PROTOCOL_VERSION})
        reply = self._receive()
        if reply.get("type") != "handshake":
            raise AdapterProtocolError(f"expected a handshake reply, got {reply!r}")
        result = check_handshake(reply)
        self._handshaken = True
        return result

    def score(self, request: AdapterScoreRequest) -> AdapterScoreResponse:
        with self._lock:
            if not self._handshaken:
                self._handshake_locked()
            message = {"type": "score"}
            message.update(request.to_wire_dict())
            self._send(message)
            reply = self._receive()
            if reply.get("type") != "score":
                raise AdapterProtocolError(f"expected a score reply, got type {reply.get('type')!r}")
            parsed = AdapterScoreResponse.from_wire_dict(reply)
            if parsed.request_id != request.request_id:
                raise AdapterProtocolError(
                    f"response echoes request_id {parsed.request_id!r}, "
                    f"expected {request.request_id!r}"
                )
            return parsed

    def close(self) -> None:
        proc = self._proc
        self._proc = None
        self._handshaken = False
        if proc is None:
            return
        try:
            if proc.stdin:
                proc.stdin.close()
            proc.terminate()
            proc.wait(timeout=2)
        except Exception:
            try:
                proc.kill()
            except Exception:
                pass


def make_adapter_client(target, timeout_ms: int = 30000):
    """Build a client from an endpoint URL or an argv list / "stdio:" string."""
    if isinstance(target, (list, tuple)):
        return StdioAdapterClient(target, timeout_ms=timeout_ms)
    if isinstance(target, str):
        if target.startswith(("http://", "https://")):
            return HttpAdapterClient(target, timeout_ms=timeout_ms)
        if target.startswith("stdio:"):
            import shlex

            return StdioAdapterClient(shlex.split(target[len("stdio:"):]), timeout_ms=timeout_ms)
    raise ValueError(f"cannot build an adapter client from {target!r}")


def adapter_score(target, request: AdapterScoreRequest, timeout_ms: int = 30000) -> AdapterScoreResponse:
    """One-shot convenience: handshake, score, close."""
    client = make_adapter_client(target, timeout_ms=timeout_ms)
    try:
        return client.score(request)
    finally:
        client.close()
