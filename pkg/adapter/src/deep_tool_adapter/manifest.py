"""Serving manifest: which tools this process offers and on what terms.

The manifest is deliberately small. It pins the protocol version, picks
the device, fixes the seed that derives the deep-feature weights, and
lists the served tools. Every listed name must be one this package can
actually implement; a manifest asking for a tool we have no code for is
rejected at load time rather than at the first request.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

PROTOCOL_VERSION = "agentiqa-adapter/1"

# Tool name -> reference mode it requires. This is the full set the
# sidecar knows how to serve; a manifest may serve any subset.
KNOWN_TOOLS = {
    "ECHO": "NR",
    "LPIPS": "FR",
}

DEFAULT_SEED = 2024


class ManifestError(ValueError):
    """The manifest file is missing, malformed, or self-contradictory."""


@dataclass(frozen=True)
class ServedTool:
    name: str
    mode: str
    weights: str | None = None


@dataclass(frozen=True)
class AdapterManifest:
    tools: tuple[ServedTool, ...]
    device: str = "cpu"
    seed: int = DEFAULT_SEED
    protocol: str = PROTOCOL_VERSION

    def names(self) -> list[str]:
        return [tool.name for tool in self.tools]


def default_manifest() -> AdapterManifest:
    tools = tuple(ServedTool(name, mode) for name, mode in KNOWN_TOOLS.items())
    return AdapterManifest(tools=tools)


def validate_manifest(manifest: AdapterManifest) -> AdapterManifest:
    problems = []
    if manifest.protocol != PROTOCOL_VERSION:
        problems.append(
            f"protocol must be {PROTOCOL_VERSION!r}, got {manifest.protocol!r}"
        )
    if manifest.device != "cpu":
        problems.append(f"only cpu inference is available, got {manifest.device!r}")
    if not isinstance(manifest.seed, int) or isinstance(manifest.seed, bool):
        problems.append("seed must be an integer")
    if not manifest.tools:
        problems.append("manifest serves no tools")
    seen = set()
    for tool in manifest.tools:
        if tool.name in seen:
            problems.append(f"tool {tool.name!r} listed twice")
        seen.add(tool.name)
        expected = KNOWN_TOOLS.get(tool.name)
        if expected is None:
            problems.append(f"no implementation for tool {tool.name!r}")
        elif tool.mode != expected:
            problems.append(
                f"{tool.name} is a {expected} tool, manifest says {tool.mode!r}"
            )
    if problems:
        raise ManifestError("; ".join(problems))
    return manifest


def load_manifest(path: str) -> AdapterManifest:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            data = json.load(handle)
    except FileNotFoundError:
        raise ManifestError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise ManifestError(f"manifest is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise ManifestError("manifest must be a JSON object")
    raw_tools = data.get("tools")
    if not isinstance(raw_tools, list):
        raise ManifestError("manifest needs a 'tools' list")
    tools = []
    for entry in raw_tools:
        if not isinstance(entry, dict) or "name" not in entry or "mode" not in entry:
            raise ManifestError(f"each tool entry needs name and mode: {entry!r}")
        weights = entry.get("weights")
        if weights is not None and not isinstance(weights, str):
            raise ManifestError(f"tool weights must be a path string: {entry!r}")
        tools.append(ServedTool(str(entry["name"]), str(entry["mode"]), weights))
    manifest = AdapterManifest(
        tools=tuple(tools),
        device=str(data.get("device", "cpu")),
        seed=data.get("seed", DEFAULT_SEED),
        protocol=str(data.get("protocol", PROTOCOL_VERSION)),
    )
    return validate_manifest(manifest)
