"""The per-assessment input bundle."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .images import ImageRef


class QueryEmptyError(ValueError):
    """The query text is empty or whitespace."""


@dataclass(frozen=True)
class QueryContext:
    """What the caller handed us for one assessment.

    ``tool_constraints`` restricts execution to the named tools regardless
    of what the query text mentions.
    """

    query_text: str
    distorted: ImageRef
    reference: Optional[ImageRef] = None
    tool_constraints: Optional[tuple] = None

    @property
    def has_reference(self) -> bool:
        return self.reference is not None
