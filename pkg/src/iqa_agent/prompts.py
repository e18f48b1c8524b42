"""Loading and rendering of the versioned prompt template assets.

Templates are plain text files shipped inside the package. Rendering is a
literal token replacement of ``{slot}`` markers, deliberately not
str.format: the templates contain JSON braces that must survive verbatim.
"""

from __future__ import annotations

from functools import lru_cache
from importlib import resources


class TemplateMissingError(FileNotFoundError):
    """A prompt template asset is absent from the package."""


PLANNER = "planner_system"
DETECTION = "detection_system"
ANALYSIS = "analysis_system"
TOOL_SELECTION = "tool_selection_system"
SUMMARIZER_INTERPRETATION = "summarizer_interpretation_system"
SUMMARIZER_SCORE = "summarizer_score_system"


@lru_cache(maxsize=None)
def load_prompt(name: str) -> str:
    resource = resources.files("iqa_agent").joinpath(f"assets/prompts/{name}.txt")
    try:
        return resource.read_text("utf-8")
    except (FileNotFoundError, OSError) as exc:
        raise TemplateMissingError(f"prompt template not found: {name}") from exc


def render(template: str, **slots: str) -> str:
    out = template
    for key, value in slots.items():
        out = out.replace("{" + key + "}", value)
    return out
