"""The tools this sidecar can serve.

Each tool takes decoded uint8 RGB arrays plus the request metadata and
returns one raw score. Raw means raw: no calibration, no clamping to
the MOS scale. ECHO exists for protocol conformance work and costs
nothing; LPIPS is the deep-feature distance.
"""

from __future__ import annotations

import threading
from typing import Optional

import numpy as np

from .features import DeepFeatureMetric
from .manifest import AdapterManifest

DEFAULT_ECHO_SCORE = 3.0


class ToolError(ValueError):
    """The request reached a tool it cannot score."""


class EchoTool:
    name = "ECHO"
    needs_reference = False

    def score(self, distorted: np.ndarray, reference: Optional[np.ndarray], metadata: Optional[dict]) -> float:
        value = (metadata or {}).get("score", DEFAULT_ECHO_SCORE)
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ToolError(f"metadata score must be numeric, got {value!r}")


class LpipsTool:
    name = "LPIPS"
    needs_reference = True

    def __init__(self, seed: int):
        self._metric = DeepFeatureMetric(seed)
        # One forward pass at a time: the transport may serve requests
        # concurrently, inference on a device stays serialized.
        self._forward = threading.Lock()

    def score(self, distorted: np.ndarray, reference: Optional[np.ndarray], metadata: Optional[dict]) -> float:
        assert reference is not None
        with self._forward:
            return self._metric.distance(distorted, reference)


def build_tools(manifest: AdapterManifest) -> dict:
    built = {}
    for served in manifest.tools:
        if served.name == "ECHO":
            built[served.name] = EchoTool()
        elif served.name == "LPIPS":
            built[served.name] = LpipsTool(manifest.seed)
    return built
