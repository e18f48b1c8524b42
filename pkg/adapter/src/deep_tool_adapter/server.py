"""Front ends: newline JSON over stdio, or HTTP.

Both speak for one AdapterService. The stdio loop reads one message per
line and tags replies with the mirrored ``type`` field; the HTTP server
maps GET /handshake and POST /score onto the same payloads. Request
handling over HTTP is concurrent (one thread per connection), which is
safe because the service keeps inference serialized itself.
"""

from __future__ import annotations

import json
import sys
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

from .service import AdapterService


def _emit(sink, payload: dict) -> None:
    sink.write(json.dumps(payload) + "\n")
    sink.flush()


def run_stdio(service: AdapterService, source=None, sink=None) -> None:
    source = source if source is not None else sys.stdin
    sink = sink if sink is not None else sys.stdout
    for line in source:
        line = line.strip()
        if not line:
            continue
        try:
            message = json.loads(line)
        except json.JSONDecodeError:
            _emit(sink, {"type": "error", "message": "request line is not JSON"})
            continue
        if not isinstance(message, dict):
            _emit(sink, {"type": "error", "message": "request must be an object"})
            continue
        kind = message.get("type")
        if kind == "handshake":
            complaint = service.check_peer_version(message.get("version"))
            if complaint:
                _emit(sink, {"type": "error", "message": complaint})
            else:
                _emit(sink, dict(service.handshake_payload(), type="handshake"))
        elif kind == "score":
            _emit(sink, dict(service.handle_score(message), type="score"))
        else:
            _emit(sink, {"type": "error", "message": f"unknown message type: {kind!r}"})


class _HttpServer(ThreadingHTTPServer):
    daemon_threads = True
    # Bursts of short-lived connections are the normal load shape for
    # this service; the default backlog of 5 drops connections under it.
    request_queue_size = 128


def build_http_server(service: AdapterService, port: int) -> _HttpServer:
    class Handler(BaseHTTPRequestHandler):
        protocol_version = "HTTP/1.1"

        def log_message(self, *args):
            pass

        def _send(self, payload: dict, code: int = 200) -> None:
            body = json.dumps(payload).encode("utf-8")
            self.send_response(code)
            self.send_header("Content-Type", "application/json")
            self.send_header("Content-Length", str(len(body)))
            self.end_headers()
            self.wfile.write(body)

        def do_GET(self):
            if self.path.rstrip("/").endswith("handshake"):
                self._send(service.handshake_payload())
            else:
                self._send({"message": "not found"}, code=404)

        def do_POST(self):
            if not self.path.rstrip("/").endswith("score"):
                self._send({"message": "not found"}, code=404)
                return
            length = int(self.headers.get("Content-Length", "0"))
            try:
                body = json.loads(self.rfile.read(length).decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                self._send({"message": "request body is not JSON"}, code=400)
                return
            self._send(service.handle_score(body))

    return _HttpServer(("127.0.0.1", port), Handler)


def run_http(service: AdapterService, port: int, announce=None) -> None:
    server = build_http_server(service, port)
    if announce is not None:
        announce(server.server_address[1])
    try:
        server.serve_forever()
    finally:
        server.server_close()
