"""Tool registry: descriptor loading, lookup and deterministic ranking.

The registry file is a JSON document listing every scoring tool the
pipeline may invoke: its reference mode, what distortions it is known to
be strong at, how it is bound (native kernel, external adapter, or not
available), and optionally a fitted calibration curve plus native output
range. File order is meaningful: it breaks ties during ranking.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Optional

from ..calibration import UnknownToolError
from ..model import DistortionCategory, ReferenceMode

MODE_FR = "FR"
MODE_NR = "NR"

_BINDING_KINDS = ("native", "adapter", "unavailable")

# The only tools allowed to bind to in-process kernels.
_NATIVE_TOOL_NAMES = frozenset({"PSNR", "SSIM", "MS-SSIM", "GMSD"})

# Historical spellings that should resolve to canonical registry names.
NAME_ALIASES = {
    "UNIQIE": "UNIQUE",
    "TOPIQ": "TOPIQ_FR",
    "TOPIQ-FR": "TOPIQ_FR",
    "Q-ALIGN": "QAlign",
    "MSSSIM": "MS-SSIM",
    "MS_SSIM": "MS-SSIM",
}

DEFAULT_TOOL_BY_MODE = {MODE_FR: "TOPIQ_FR", MODE_NR: "QAlign"}


class DuplicateToolError(ValueError):
    """Two descriptors share a name."""


class MalformedDescriptorError(ValueError):
    """A descriptor is missing fields or carries values of the wrong shape."""


class RegistryEmptyError(ValueError):
    """An operation that needs candidates was given an empty registry."""


@dataclass(frozen=True)
class BestAt:
    """One distortion a tool is known to handle well.

    The category is free text here (registry metadata may carry groupings
    outside the canonical plan vocabulary); the subtype is optional.
    """

    category: str
    subtype: Optional[str] = None


@dataclass(frozen=True)
class Binding:
    """How a tool is invoked."""

    kind: str
    kernel: Optional[str] = None
    endpoint: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in _BINDING_KINDS:
            raise MalformedDescriptorError(f"unknown binding kind: {self.kind!r}")
        if self.kind == "native" and not self.kernel:
            raise MalformedDescriptorError("native bindings must name a kernel")


@dataclass(frozen=True)
class ToolDescriptor:
    name: str
    mode: str
    description: str
    binding: Binding
    best_at: tuple[BestAt, ...] = ()
    beta: Optional[tuple[float, float, float, float, float]] = None
    native_range: Optional[tuple[float, float]] = None
    higher_better: bool = True

    def matches_mode(self, mode: ReferenceMode) -> bool:
        wanted = MODE_FR if mode == ReferenceMode.FULL_REFERENCE else MODE_NR
        return self.mode == wanted


def _descriptor_from_json(data: dict) -> ToolDescriptor:
    try:
        name = data["name"]
        mode = data["mode"]
        description = data.get("description", "")
        binding_data = data["binding"]
    except KeyError as exc:
        raise MalformedDescriptorError(f"descriptor missing field {exc}: {data!r}") from exc
    if not isinstance(name, str) or not name:
        raise MalformedDescriptorError(f"descriptor name must be a non-empty string: {data!r}")
    if mode not in (MODE_FR, MODE_NR):
        raise MalformedDescriptorError(f"tool {name}: mode must be FR or NR, got {mode!r}")
    if not isinstance(binding_data, dict):
        raise MalformedDescriptorError(f"tool {name}: binding must be an object")
    binding = Binding(
        kind=binding_data.get("kind", ""),
        kernel=binding_data.get("kernel"),
        endpoint=binding_data.get("endpoint"),
    )
    if binding.kind == "native" and name not in _NATIVE_TOOL_NAMES:
        raise MalformedDescriptorError(
            f"tool {name}: only {sorted(_NATIVE_TOOL_NAMES)} may bind native kernels"
        )

    best_at = []
    for entry in data.get("best_at", []):
        if not isinstance(entry, dict) or "category" not in entry:
            raise MalformedDescriptorError(f"tool {name}: bad best_at entry {entry!r}")
        best_at.append(BestAt(category=entry["category"], subtype=entry.get("subtype")))

    beta = data.get("beta")
    if beta is not None:
        if not isinstance(beta, list) or len(beta) != 5:
            raise MalformedDescriptorError(f"tool {name}: beta must be a list of 5 numbers")
        beta = tuple(float(b) for b in beta)

    native_range = data.get("native_range")
    if native_range is not None:
        if not isinstance(native_range, list) or len(native_range) != 2:
            raise MalformedDescriptorError(f"tool {name}: native_range must be [lo, hi]")
        native_range = (float(native_range[0]), float(native_range[1]))

    return ToolDescriptor(
        name=name,
        mode=mode,
        description=str(description),
        binding=binding,
        best_at=tuple(best_at),
        beta=beta,
        native_range=native_range,
        higher_better=bool(data.get("higher_better", True)),
    )


class Registry:
    """Ordered collection of tool descriptors with alias-aware lookup."""

    def __init__(self, descriptors: Iterable[ToolDescriptor]):
        self._ordered: list[ToolDescriptor] = []
        self._by_name: dict[str, ToolDescriptor] = {}
        for descriptor in descriptors:
            key = descriptor.name.upper()
            if key in self._by_name:
                raise DuplicateToolError(f"duplicate tool name: {descriptor.name}")
            self._ordered.append(descriptor)
            self._by_name[key] = descriptor

    def __len__(self) -> int:
        return len(self._ordered)

    def __iter__(self):
        return iter(self._ordered)

    def names(self) -> list[str]:
        return [d.name for d in self._ordered]

    def resolve_name(self, name: str) -> Optional[str]:
        """Canonical registry name for ``name``, or None if unknown."""
        key = name.strip().upper()
        key = NAME_ALIASES.get(key, key)
        descriptor = self._by_name.get(key.upper())
        return descriptor.name if descriptor else None

    def get(self, name: str) -> ToolDescriptor:
        canonical = self.resolve_name(name)
        if canonical is None:
            raise UnknownToolError(name)
        return self._by_name[canonical.upper()]

    def has(self, name: str) -> bool:
        return self.resolve_name(name) is not None

    def by_mode(self, mode: ReferenceMode) -> list[ToolDescriptor]:
        return [d for d in self._ordered if d.matches_mode(mode)]

    def with_beta(self) -> list[ToolDescriptor]:
        return [d for d in self._ordered if d.beta is not None]


def load_registry(path: str) -> Registry:
    """Load and validate a registry JSON file."""
    with open(path, "r", encoding="utf-8") as fh:
        data = json.load(fh)
    return _registry_from_data(data, origin=path)


def load_default_registry() -> Registry:
    """The registry bundled with the package."""
    text = resources.files("iqa_agent").joinpath("assets/registry.json").read_text("utf-8")
    return _registry_from_data(json.loads(text), origin="<bundled>")


def _registry_from_data(data, origin: str) -> Registry:
    if not isinstance(data, dict) or not isinstance(data.get("tools"), list):
        raise MalformedDescriptorError(f"{origin}: registry must be an object with a tools list")
    return Registry(_descriptor_from_json(entry) for entry in data["tools"])


def _affinity(descriptor: ToolDescriptor, distortion: DistortionCategory) -> int:
    """2 for a subtype hit, 1 for a category hit, 0 otherwise."""
    category = distortion.name.strip().lower()
    subtype = distortion.subtype.strip().lower() if distortion.subtype else None
    best = 0
    for entry in descriptor.best_at:
        if subtype and entry.subtype and entry.subtype.strip().lower() == subtype:
            return 2
        if entry.category.strip().lower() == category:
            best = max(best, 1)
    return best


def select_tool_deterministic(
    distortion: DistortionCategory,
    mode: ReferenceMode,
    registry: Registry,
    defaults: Optional[dict] = None,
) -> str:
    """Rank mode-compatible tools by best-at affinity; ties keep file order.

    When no candidate scores above zero the configured per-mode default is
    returned (falling back to the first mode-compatible tool if the default
    is absent from this registry).
    """
    if len(registry) == 0:
        raise RegistryEmptyError("cannot select a tool from an empty registry")
    candidates = registry.by_mode(mode)
    if not candidates:
        raise RegistryEmptyError(f"registry has no tools for mode {mode.value}")

    best_tool = None
    best_score = 0
    for descriptor in candidates:
        score = _affinity(descriptor, distortion)
        if score > best_score:
            best_tool = descriptor.name
            best_score = score
    if best_tool is not None:
        return best_tool

    table = dict(DEFAULT_TOOL_BY_MODE)
    if defaults:
        table.update(defaults)
    mode_key = MODE_FR if mode == ReferenceMode.FULL_REFERENCE else MODE_NR
    default = table.get(mode_key)
    if default and registry.has(default):
        resolved = registry.get(default)
        if resolved.matches_mode(mode):
            return resolved.name
    return candidates[0].name
