"""Agentic image quality assessment.

A planner / executor / summarizer pipeline that answers quality questions
about images by combining a vision-language model with a registry of
classical and learned scoring tools.
"""

from .model import (  # noqa: F401
    AnswerKind,
    AnalysisEntry,
    CANONICAL_CATEGORIES,
    DistortionCategory,
    DistortionSource,
    FinalAnswer,
    IntermediateState,
    Plan,
    PlanFlags,
    PlanViolation,
    QUALITY_LEVELS,
    QualityLevel,
    QueryType,
    ReferenceMode,
    Severity,
    SEVERITY_LABELS,
    ToolScore,
    ToolStatus,
    TraceEntry,
    normalize_category,
    normalize_severity,
    validate_plan,
)
from .context import QueryContext, QueryEmptyError  # noqa: F401
from .images import ImageRef  # noqa: F401
from .config import EngineConfig, load_config  # noqa: F401
from .engine import AssessmentEngine  # noqa: F401
from .summarizer import FusionInputs, fuse_scores, uniform_level_average  # noqa: F401

__version__ = "0.1.0"
