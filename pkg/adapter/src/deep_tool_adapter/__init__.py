"""Scoring sidecar for the IQA engine.

Serves perceptual quality tools behind the adapter wire protocol
(newline JSON over stdio, or HTTP with GET /handshake and POST /score).
Raw scores go back uncalibrated; mapping them onto the MOS scale is the
engine's job.
"""

from .features import DeepFeatureMetric
from .manifest import PROTOCOL_VERSION, AdapterManifest, ManifestError, default_manifest, load_manifest
from .service import AdapterService

__all__ = [
    "AdapterManifest",
    "AdapterService",
    "DeepFeatureMetric",
    "ManifestError",
    "PROTOCOL_VERSION",
    "default_manifest",
    "load_manifest",
]
