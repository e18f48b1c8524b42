"""Engine configuration: defaults, config file, environment, flag overlay.

Precedence, lowest to highest: built-in defaults, JSON config file,
environment variables (IQA_AGENT_ prefix, field names uppercased), explicit
flag values. Every field is a flat scalar so all four layers share one
coercion table.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from typing import Any, Mapping, Optional

ENV_PREFIX = "IQA_AGENT_"

BACKEND_KINDS = ("none", "remote", "replay", "record")

DEFAULT_QUERY = "What is the overall quality of this image?"


class ConfigError(ValueError):
    """The assembled configuration is unusable."""


@dataclass(frozen=True)
class EngineConfig:
    backend: str = "none"
    endpoint: Optional[str] = None
    model: Optional[str] = None
    api_key: Optional[str] = None
    cassette_path: Optional[str] = None
    registry_path: Optional[str] = None
    fusion_mode: str = "normalized"
    eta: float = 1.0
    logistic_form: str = "standard"
    max_parallel_tools: int = 4
    per_tool_timeout_ms: int = 30000
    on_tool_failure: str = "skip"
    replay_strict: bool = False
    adapter_target: Optional[str] = None
    max_reflect_rounds: int = 2
    default_query: str = DEFAULT_QUERY
    output_dir: str = "."

    def validate(self) -> "EngineConfig":
        if self.backend not in BACKEND_KINDS:
            raise ConfigError(f"backend must be one of {BACKEND_KINDS}, got {self.backend!r}")
        if self.backend in ("replay", "record") and not self.cassette_path:
            raise ConfigError(f"backend {self.backend!r} needs cassette_path")
        if self.backend in ("remote", "record") and not (self.endpoint and self.model):
            raise ConfigError(f"backend {self.backend!r} needs endpoint and model")
        if self.backend == "replay" and not os.path.exists(self.cassette_path):
            raise ConfigError(f"cassette not found: {self.cassette_path}")
        if self.registry_path and not os.path.exists(self.registry_path):
            raise ConfigError(f"registry not found: {self.registry_path}")
        if self.fusion_mode not in ("normalized", "literal"):
            raise ConfigError(f"fusion_mode must be normalized or literal: {self.fusion_mode!r}")
        if self.logistic_form not in ("standard", "as_printed"):
            raise ConfigError(
                f"logistic_form must be standard or as_printed: {self.logistic_form!r}"
            )
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError(f"eta must be a positive finite number: {self.eta!r}")
        if self.on_tool_failure not in ("skip", "abort"):
            raise ConfigError(f"on_tool_failure must be skip or abort: {self.on_tool_failure!r}")
        if self.max_parallel_tools < 1:
            raise ConfigError("max_parallel_tools must be at least 1")
        if self.max_reflect_rounds < 0:
            raise ConfigError("max_reflect_rounds must be non-negative")
        return self


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(EngineConfig)}


def _coerce(name: str, value: Any) -> Any:
    if value is None:
        return None
    declared = _FIELD_TYPES[name]
    if declared in ("bool",):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: cannot read {value!r} as a boolean")
    if declared in ("int",):
        try:
            return int(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: cannot read {value!r} as an integer") from exc
    if declared in ("float",):
        try:
            return float(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: cannot read {value!r} as a number") from exc
    return str(value)


def load_config(
    flags: Optional[Mapping[str, Any]] = None,
    env: Optional[Mapping[str, str]] = None,
    config_path: Optional[str] = None,
) -> EngineConfig:
    """Assemble and validate an EngineConfig from the four layers.

    ``flags`` entries with value None are treated as not-given so argparse
    namespaces can be passed through directly.
    """
    values: dict[str, Any] = {}

    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {config_path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("config file must hold a JSON object")
        for key, value in doc.items():
            if key not in _FIELD_TYPES:
                raise ConfigError(f"unknown config key: {key!r}")
            values[key] = _coerce(key, value)

    env = os.environ if env is None else env
    for name in _FIELD_TYPES:
        env_value = env.get(ENV_PREFIX + name.upper())
        if env_value is not None:
            values[name] = _coerce(name, env_value)

    for name, value in (flags or {}).items():
        if name in _FIELD_TYPES and value is not None:
            values[name] = _coerce(name, value)

    return EngineConfig(**values).validate()
