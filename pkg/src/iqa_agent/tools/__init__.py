"""Tool registry, native scoring kernels, and the external adapter client."""

from .registry import (  # noqa: F401
    Binding,
    BestAt,
    Registry,
    ToolDescriptor,
    DuplicateToolError,
    MalformedDescriptorError,
    RegistryEmptyError,
    load_registry,
    load_default_registry,
    select_tool_deterministic,
)
from . import kernels  # noqa: F401
from . import adapter_client  # noqa: F401
