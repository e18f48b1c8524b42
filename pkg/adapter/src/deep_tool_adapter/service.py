"""Transport-independent request handling.

One AdapterService sits behind both front ends. It owns the served
tools, decodes image payloads, and turns every score request into a
reply dict that echoes the request_id. Failures become status "error"
replies, never exceptions across the wire; a request the service cannot
even attribute to an id gets an empty one back.
"""

from __future__ import annotations

import base64
import binascii
import io
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .manifest import AdapterManifest
from .tools import ToolError, build_tools


class _Reject(Exception):
    """Internal: request invalid for a reason worth reporting verbatim."""


def _decode_image(entry, label: str) -> np.ndarray:
    if not isinstance(entry, dict) or "data" not in entry:
        raise _Reject(f"missing {label} image")
    try:
        raw = base64.b64decode(entry["data"], validate=True)
    except (binascii.Error, TypeError) as exc:
        raise _Reject(f"{label} payload is not valid base64: {exc}")
    try:
        with Image.open(io.BytesIO(raw)) as image:
            return np.asarray(image.convert("RGB"))
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise _Reject(f"cannot decode {label} image bytes: {exc}")


class AdapterService:
    def __init__(self, manifest: AdapterManifest):
        self.manifest = manifest
        self._tools = build_tools(manifest)

    def handshake_payload(self) -> dict:
        return {"version": self.manifest.protocol, "tools": self.manifest.names()}

    def check_peer_version(self, version) -> Optional[str]:
        """Complaint string when the peer announced a version we don't speak."""
        if version is not None and version != self.manifest.protocol:
            return (
                f"adapter speaks {self.manifest.protocol!r}, "
                f"peer sent {version!r}"
            )
        return None

    def handle_score(self, body) -> dict:
        if not isinstance(body, dict):
            return {
                "request_id": "",
                "status": "error",
                "message": "score request must be an object",
            }
        request_id = str(body.get("request_id", ""))

        def error(message: str) -> dict:
            return {"request_id": request_id, "status": "error", "message": message}

        tool = self._tools.get(body.get("tool"))
        if tool is None:
            return error("unknown tool")
        try:
            distorted = _decode_image(body.get("distorted"), "distorted")
            reference = None
            if tool.needs_reference:
                if body.get("reference") is None:
                    return error(f"{tool.name} needs a reference image")
                reference = _decode_image(body.get("reference"), "reference")
            raw = tool.score(distorted, reference, body.get("metadata"))
        except _Reject as exc:
            return error(str(exc))
        except (ToolError, ValueError) as exc:
            return error(str(exc))
        return {"request_id": request_id, "status": "ok", "raw_score": float(raw)}
