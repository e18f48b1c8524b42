"""Core domain model for the assessment pipeline.

Plans, distortion vocabulary, severity and quality scales, tool scores,
intermediate state and final answers. Everything here is plain data with
JSON codecs; no I/O and no model calls. The JSON field names are part of
the package's wire surface and are kept stable.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Mapping, Optional, Sequence, Union


class SchemaError(ValueError):
    """A JSON document does not match the expected shape."""


class UnknownSeverityError(ValueError):
    """A severity label is outside the canonical scale and its aliases."""


# ---------------------------------------------------------------------------
# Distortion vocabulary
# ---------------------------------------------------------------------------

CANONICAL_CATEGORIES: tuple[str, ...] = (
    "Blurs",
    "Color distortions",
    "Compression",
    "Noise",
    "Brightness change",
    "Sharpness",
    "Contrast",
)

_CATEGORY_ALIASES = {
    "blur": "Blurs",
    "blurs": "Blurs",
    "color distortion": "Color distortions",
    "color distortions": "Color distortions",
    "colour distortion": "Color distortions",
    "colour distortions": "Color distortions",
    "compression": "Compression",
    "noise": "Noise",
    "brightness": "Brightness change",
    "brightness change": "Brightness change",
    "brightness changes": "Brightness change",
    "sharpness": "Sharpness",
    "contrast": "Contrast",
}


def normalize_category(name: str) -> Optional[str]:
    """Map free text onto one of the seven canonical distortion categories.

    Returns the canonical spelling, or None when the text does not name a
    known category. Matching is case-insensitive and whitespace-tolerant.
    """
    if not isinstance(name, str):
        return None
    key = " ".join(name.strip().lower().split())
    return _CATEGORY_ALIASES.get(key)


@dataclass(frozen=True)
class DistortionCategory:
    """A canonical distortion category with an optional free-text subtype.

    The category name must come from ``CANONICAL_CATEGORIES`` for plan
    validity; the subtype (e.g. "Gaussian blur" under "Blurs") refines tool
    ranking but is never required.
    """

    name: str
    subtype: Optional[str] = None

    def to_json_value(self) -> Union[str, dict]:
        if self.subtype is None:
            return self.name
        return {"category": self.name, "subtype": self.subtype}

    @classmethod
    def from_json_value(cls, value: Any) -> "DistortionCategory":
        if isinstance(value, str):
            return cls(name=value)
        if isinstance(value, Mapping):
            name = value.get("category") or value.get("name") or value.get("type")
            if not isinstance(name, str):
                raise SchemaError(f"distortion entry without a category name: {value!r}")
            subtype = value.get("subtype")
            if subtype is not None and not isinstance(subtype, str):
                raise SchemaError(f"distortion subtype must be a string: {value!r}")
            return cls(name=name, subtype=subtype)
        raise SchemaError(f"cannot read a distortion from {value!r}")


# ---------------------------------------------------------------------------
# Severity scale
# ---------------------------------------------------------------------------

SEVERITY_LABELS: tuple[str, ...] = ("none", "slight", "moderate", "severe", "extreme")

_SEVERITY_ALIASES = {
    "mild": "slight",
    "heavy": "severe",
}


@dataclass(frozen=True, order=True)
class Severity:
    """A point on the five-step severity scale, ordered by ordinal."""

    ordinal: int
    label: str = field(compare=False)

    def to_json_value(self) -> str:
        return self.label


SEVERITIES: tuple[Severity, ...] = tuple(
    Severity(ordinal=i, label=lab) for i, lab in enumerate(SEVERITY_LABELS)
)
_SEVERITY_BY_LABEL = {s.label: s for s in SEVERITIES}


def normalize_severity(value: Union[str, int, Severity]) -> Severity:
    """Normalize a severity expression onto the canonical five-step scale.

    Accepts canonical labels (idempotently), the aliases "mild" and "heavy",
    and numeric one-to-five grades (strings or ints) which map positionally
    onto the scale. Anything else raises UnknownSeverityError.
    """
    if isinstance(value, Severity):
        return value
    if isinstance(value, bool):
        raise UnknownSeverityError(f"not a severity: {value!r}")
    if isinstance(value, int):
        if 1 <= value <= 5:
            return SEVERITIES[value - 1]
        raise UnknownSeverityError(f"numeric severity out of range 1..5: {value!r}")
    if isinstance(value, str):
        key = " ".join(value.strip().lower().split())
        key = _SEVERITY_ALIASES.get(key, key)
        if key in _SEVERITY_BY_LABEL:
            return _SEVERITY_BY_LABEL[key]
        if key in {"1", "2", "3", "4", "5"}:
            return SEVERITIES[int(key) - 1]
    raise UnknownSeverityError(f"unknown severity label: {value!r}")


# ---------------------------------------------------------------------------
# Quality levels
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class QualityLevel:
    """One of the five discrete quality levels, valued 1 (bad) to 5 (excellent)."""

    value: int
    label: str = field(compare=False)


QUALITY_LEVELS: tuple[QualityLevel, ...] = (
    QualityLevel(1, "bad"),
    QualityLevel(2, "poor"),
    QualityLevel(3, "fair"),
    QualityLevel(4, "good"),
    QualityLevel(5, "excellent"),
)

# Multiple-choice letters run from best to worst: A is excellent, E is bad.
LEVEL_LETTERS: tuple[str, ...] = ("A", "B", "C", "D", "E")
_LEVEL_BY_LETTER = {
    "A": QUALITY_LEVELS[4],
    "B": QUALITY_LEVELS[3],
    "C": QUALITY_LEVELS[2],
    "D": QUALITY_LEVELS[1],
    "E": QUALITY_LEVELS[0],
}
_LETTER_BY_VALUE = {level.value: letter for letter, level in _LEVEL_BY_LETTER.items()}
_LEVEL_BY_LABEL = {lv.label: lv for lv in QUALITY_LEVELS}


def level_from_letter(letter: str) -> QualityLevel:
    key = letter.strip().upper()
    if key not in _LEVEL_BY_LETTER:
        raise SchemaError(f"not a quality-level letter: {letter!r}")
    return _LEVEL_BY_LETTER[key]


def level_from_label(label: str) -> QualityLevel:
    key = label.strip().lower()
    if key not in _LEVEL_BY_LABEL:
        raise SchemaError(f"not a quality-level label: {label!r}")
    return _LEVEL_BY_LABEL[key]


def letter_for_level(level: QualityLevel) -> str:
    return _LETTER_BY_VALUE[level.value]


def nearest_level(score: float) -> QualityLevel:
    """The discrete level closest to a continuous 1..5 score (ties go up)."""
    if not math.isfinite(score):
        raise ValueError(f"score must be finite, got {score!r}")
    best = min(QUALITY_LEVELS, key=lambda lv: (abs(lv.value - score), -lv.value))
    return best


# ---------------------------------------------------------------------------
# Enumerations used by plans and answers
# ---------------------------------------------------------------------------


class QueryType(enum.Enum):
    IQA = "IQA"
    OTHER = "Other"


class DistortionSource(enum.Enum):
    EXPLICIT = "Explicit"
    INFERRED = "Inferred"


class ReferenceMode(enum.Enum):
    FULL_REFERENCE = "Full-Reference"
    NO_REFERENCE = "No-Reference"


class AnswerKind(enum.Enum):
    SCORE = "Score"
    CHOICE = "Choice"
    FREE_TEXT = "FreeText"


_QUERY_TYPE_ALIASES = {
    "iqa": QueryType.IQA,
    "other": QueryType.OTHER,
}

# "Explict" shows up in the wild; treat it as Explicit on ingest.
_SOURCE_ALIASES = {
    "explicit": DistortionSource.EXPLICIT,
    "explict": DistortionSource.EXPLICIT,
    "inferred": DistortionSource.INFERRED,
}

_REFERENCE_ALIASES = {
    "full-reference": ReferenceMode.FULL_REFERENCE,
    "full reference": ReferenceMode.FULL_REFERENCE,
    "fullreference": ReferenceMode.FULL_REFERENCE,
    "fr": ReferenceMode.FULL_REFERENCE,
    "no-reference": ReferenceMode.NO_REFERENCE,
    "no reference": ReferenceMode.NO_REFERENCE,
    "noreference": ReferenceMode.NO_REFERENCE,
    "nr": ReferenceMode.NO_REFERENCE,
}


def _parse_enum(value: Any, table: Mapping[str, Any], what: str) -> Any:
    if isinstance(value, str):
        key = " ".join(value.strip().lower().split())
        if key in table:
            return table[key]
    raise SchemaError(f"not a valid {what}: {value!r}")


# ---------------------------------------------------------------------------
# Plan
# ---------------------------------------------------------------------------

GLOBAL_SCOPE = "Global"

_PLAN_FIELD_ALIASES = {
    "task_type": "query_type",
    "reference_type": "reference_mode",
    "required_object_names": "query_scope",
    "required_distortions": "distortions",
    "required_tool": "required_tools",
    "plan": "flags",
}

_PLAN_FIELDS = {
    "query_type",
    "query_scope",
    "distortion_source",
    "distortions",
    "reference_mode",
    "required_tools",
    "flags",
}

_FLAG_NAMES = (
    "distortion_detection",
    "distortion_analysis",
    "tool_selection",
    "tool_execute",
)


@dataclass(frozen=True)
class PlanFlags:
    """Gate bits for the four executor sub-tasks."""

    distortion_detection: bool = False
    distortion_analysis: bool = False
    tool_selection: bool = False
    tool_execute: bool = False

    def to_json_dict(self) -> dict:
        return {name: getattr(self, name) for name in _FLAG_NAMES}

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any], strict: bool = False) -> "PlanFlags":
        if not isinstance(data, Mapping):
            raise SchemaError(f"plan flags must be an object, got {data!r}")
        unknown = set(data) - set(_FLAG_NAMES)
        if unknown and strict:
            raise SchemaError(f"unknown plan flag fields: {sorted(unknown)}")
        kwargs = {}
        for name in _FLAG_NAMES:
            if name in data:
                kwargs[name] = bool(data[name])
        return cls(**kwargs)

    def any(self) -> bool:
        return any(getattr(self, name) for name in _FLAG_NAMES)


def _scope_to_json(scope: Union[str, tuple]) -> Union[str, list]:
    if scope == GLOBAL_SCOPE:
        return GLOBAL_SCOPE
    return list(scope)


def _scope_from_json(value: Any) -> Union[str, tuple]:
    if value is None:
        return GLOBAL_SCOPE
    if isinstance(value, str):
        if value.strip().lower() == "global":
            return GLOBAL_SCOPE
        # A bare string is read as a single-object scope.
        return (value,)
    if isinstance(value, Sequence):
        names = []
        for item in value:
            if not isinstance(item, str):
                raise SchemaError(f"scope entries must be strings: {item!r}")
            names.append(item)
        return tuple(names) if names else GLOBAL_SCOPE
    raise SchemaError(f"cannot read query_scope from {value!r}")


def _distortions_from_json(value: Any) -> Optional[dict]:
    if value is None:
        return None
    if not isinstance(value, Mapping):
        raise SchemaError(f"distortions must be an object or null, got {value!r}")
    out: dict[str, tuple[DistortionCategory, ...]] = {}
    for key, entries in value.items():
        if not isinstance(key, str):
            raise SchemaError(f"distortion scope keys must be strings: {key!r}")
        if isinstance(entries, (str, Mapping)):
            entries = [entries]
        if not isinstance(entries, Sequence):
            raise SchemaError(f"distortion lists must be arrays: {entries!r}")
        out[key] = tuple(DistortionCategory.from_json_value(e) for e in entries)
    return out or None


@dataclass(frozen=True)
class Plan:
    """A validated-shape assessment plan.

    ``query_scope`` is either the literal "Global" or a tuple of object
    names. ``distortions`` maps scope keys to the distortions the query
    itself named; distortions discovered later by detection live on the
    intermediate state instead.
    """

    query_type: QueryType
    query_scope: Union[str, tuple] = GLOBAL_SCOPE
    distortion_source: DistortionSource = DistortionSource.INFERRED
    distortions: Optional[dict] = None
    reference_mode: ReferenceMode = ReferenceMode.NO_REFERENCE
    required_tools: Optional[tuple[str, ...]] = None
    flags: PlanFlags = field(default_factory=PlanFlags)

    def to_json_dict(self) -> dict:
        dist = None
        if self.distortions is not None:
            dist = {
                key: [d.to_json_value() for d in entries]
                for key, entries in self.distortions.items()
            }
        return {
            "query_type": self.query_type.value,
            "query_scope": _scope_to_json(self.query_scope),
            "distortion_source": self.distortion_source.value,
            "distortions": dist,
            "reference_mode": self.reference_mode.value,
            "required_tools": list(self.required_tools) if self.required_tools else None,
            "flags": self.flags.to_json_dict(),
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any], strict: bool = False) -> "Plan":
        """Build a Plan from a JSON object.

        Accepts the historical field aliases (task_type, reference_type,
        required_object_names, required_distortions, required_tool, plan) and
        normalizes enum spellings. Unknown fields raise SchemaError in strict
        mode and are ignored otherwise.
        """
        if not isinstance(data, Mapping):
            raise SchemaError(f"plan must be a JSON object, got {data!r}")
        fields: dict[str, Any] = {}
        unknown = []
        for key, value in data.items():
            name = _PLAN_FIELD_ALIASES.get(key, key)
            if name in _PLAN_FIELDS:
                # First spelling wins when an alias and the canonical name
                # both appear; that only happens in malformed input.
                fields.setdefault(name, value)
            else:
                unknown.append(key)
        if unknown and strict:
            raise SchemaError(f"unknown plan fields: {sorted(unknown)}")
        if "query_type" not in fields:
            raise SchemaError("plan is missing query_type")
        query_type = _parse_enum(fields["query_type"], _QUERY_TYPE_ALIASES, "query_type")
        scope = _scope_from_json(fields.get("query_scope"))
        source = DistortionSource.INFERRED
        if fields.get("distortion_source") is not None:
            source = _parse_enum(fields["distortion_source"], _SOURCE_ALIASES, "distortion_source")
        distortions = _distortions_from_json(fields.get("distortions"))
        mode = ReferenceMode.NO_REFERENCE
        if fields.get("reference_mode") is not None:
            mode = _parse_enum(fields["reference_mode"], _REFERENCE_ALIASES, "reference_mode")
        tools_value = fields.get("required_tools")
        tools: Optional[tuple[str, ...]] = None
        if tools_value:
            if isinstance(tools_value, str):
                tools_value = [tools_value]
            if not isinstance(tools_value, Sequence):
                raise SchemaError(f"required_tools must be a list: {tools_value!r}")
            tools = tuple(str(t) for t in tools_value) or None
        flags = PlanFlags()
        if fields.get("flags") is not None:
            flags = PlanFlags.from_json_dict(fields["flags"], strict=strict)
        return cls(
            query_type=query_type,
            query_scope=scope,
            distortion_source=source,
            distortions=distortions,
            reference_mode=mode,
            required_tools=tools,
            flags=flags,
        )

    def with_flags(self, flags: PlanFlags) -> "Plan":
        return replace(self, flags=flags)


@dataclass(frozen=True)
class PlanViolation:
    """One machine-readable reason a plan is invalid."""

    code: str
    field: str
    message: str


def validate_plan(plan: Plan) -> list[PlanViolation]:
    """Check the structural invariants a plan must satisfy.

    Returns an empty list for a valid plan; each violation carries a stable
    code so callers can branch without string matching.
    """
    violations: list[PlanViolation] = []
    scope = plan.query_scope
    if scope != GLOBAL_SCOPE:
        if not isinstance(scope, tuple) or not scope:
            violations.append(
                PlanViolation(
                    code="EmptyScope",
                    field="query_scope",
                    message="query_scope must be 'Global' or a non-empty list of object names",
                )
            )
            scope = GLOBAL_SCOPE

    if plan.distortion_source == DistortionSource.EXPLICIT:
        if not plan.distortions:
            violations.append(
                PlanViolation(
                    code="MissingExplicitDistortions",
                    field="distortions",
                    message="distortion_source is Explicit but no distortions are listed",
                )
            )
        if plan.flags.distortion_detection:
            violations.append(
                PlanViolation(
                    code="DetectionWithExplicitSource",
                    field="flags.distortion_detection",
                    message="distortion_detection must be false when distortions are explicit",
                )
            )

    if plan.query_type == QueryType.OTHER and plan.flags.any():
        violations.append(
            PlanViolation(
                code="NonIqaFlagSet",
                field="flags",
                message="non-IQA queries must have every executor flag false",
            )
        )

    if plan.distortions:
        allowed_keys = {GLOBAL_SCOPE}
        if isinstance(scope, tuple):
            allowed_keys.update(scope)
        for key, entries in plan.distortions.items():
            if key not in allowed_keys:
                violations.append(
                    PlanViolation(
                        code="UnknownScopeKey",
                        field=f"distortions[{key!r}]",
                        message=f"distortion key {key!r} is neither 'Global' nor in query_scope",
                    )
                )
            for entry in entries:
                if entry.name not in CANONICAL_CATEGORIES:
                    violations.append(
                        PlanViolation(
                            code="UnknownDistortionCategory",
                            field=f"distortions[{key!r}]",
                            message=f"{entry.name!r} is not a canonical distortion category",
                        )
                    )
    return violations


# ---------------------------------------------------------------------------
# Executor products
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AnalysisEntry:
    """Severity assessment of one distortion within one scope."""

    scope_key: str
    distortion: DistortionCategory
    severity: Severity
    rationale: str

    def to_json_dict(self) -> dict:
        return {
            "scope_key": self.scope_key,
            "distortion": self.distortion.to_json_value(),
            "severity": self.severity.to_json_value(),
            "rationale": self.rationale,
        }

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "AnalysisEntry":
        try:
            return cls(
                scope_key=str(data["scope_key"]),
                distortion=DistortionCategory.from_json_value(data["distortion"]),
                severity=normalize_severity(data["severity"]),
                rationale=str(data.get("rationale", "")),
            )
        except KeyError as exc:
            raise SchemaError(f"analysis entry missing field {exc}") from exc


class ToolStatus(enum.Enum):
    OK = "Ok"
    FAILED = "Failed"


@dataclass(frozen=True)
class ToolScore:
    """The outcome of running one tool on one image pair.

    A Failed score never carries a calibrated value; the reason field is
    present exactly when status is Failed.
    """

    tool_name: str
    raw_score: Optional[float]
    calibrated_score: Optional[float]
    distortion_context: Optional[DistortionCategory]
    status: ToolStatus
    reason: Optional[str] = None

    def __post_init__(self) -> None:
        if self.status == ToolStatus.FAILED and self.calibrated_score is not None:
            raise ValueError("a Failed tool score cannot carry a calibrated value")
        if self.status == ToolStatus.OK and self.calibrated_score is None:
            raise ValueError("an Ok tool score must carry a calibrated value")

    def to_json_dict(self) -> dict:
        out = {
            "tool_name": self.tool_name,
            "raw_score": self.raw_score,
            "calibrated_score": self.calibrated_score,
            "distortion_context": (
                self.distortion_context.to_json_value() if self.distortion_context else None
            ),
            "status": self.status.value,
        }
        if self.status == ToolStatus.FAILED:
            out["reason"] = self.reason or "unspecified failure"
        return out

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "ToolScore":
        try:
            status = ToolStatus(data["status"])
            context = data.get("distortion_context")
            return cls(
                tool_name=str(data["tool_name"]),
                raw_score=None if data.get("raw_score") is None else float(data["raw_score"]),
                calibrated_score=(
                    None if data.get("calibrated_score") is None else float(data["calibrated_score"])
                ),
                distortion_context=(
                    DistortionCategory.from_json_value(context) if context is not None else None
                ),
                status=status,
                reason=data.get("reason"),
            )
        except KeyError as exc:
            raise SchemaError(f"tool score missing field {exc}") from exc
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc


@dataclass
class TraceEntry:
    """One pipeline stage observation.

    ``wall_ms`` is the only volatile field; digests and replay comparisons
    must exclude it.
    """

    stage: str
    wall_ms: float
    ok: bool
    detail: dict = field(default_factory=dict)

    def to_json_dict(self, include_volatile: bool = True) -> dict:
        out = {"stage": self.stage, "ok": self.ok, "detail": self.detail}
        if include_volatile:
            out["wall_ms"] = round(self.wall_ms, 3)
        return out


@dataclass
class IntermediateState:
    """Everything the executor accumulated for one assessment run."""

    plan: Plan
    detections: dict = field(default_factory=dict)
    analyses: list = field(default_factory=list)
    assignments: dict = field(default_factory=dict)
    scores: list = field(default_factory=list)
    trace: list = field(default_factory=list)

    def ok_scores(self) -> list[ToolScore]:
        return [s for s in self.scores if s.status == ToolStatus.OK]

    def to_json_dict(self, include_volatile: bool = True) -> dict:
        detections = {
            key: [d.to_json_value() for d in entries]
            for key, entries in sorted(self.detections.items())
        }
        assignments = {
            scope: dict(sorted(per_scope.items()))
            for scope, per_scope in sorted(self.assignments.items())
        }
        return {
            "plan": self.plan.to_json_dict(),
            "detections": detections,
            "analyses": [a.to_json_dict() for a in self.analyses],
            "assignments": assignments,
            "scores": [s.to_json_dict() for s in sorted(self.scores, key=lambda s: s.tool_name)],
            "trace": [t.to_json_dict(include_volatile=include_volatile) for t in self.trace],
        }

    def state_digest(self) -> str:
        """Hex digest over the canonical, volatile-free projection of the state.

        Two runs that made the same decisions produce the same digest even
        when their wall-clock timings differ.
        """
        return sha256_of_json(self.to_json_dict(include_volatile=False))


# ---------------------------------------------------------------------------
# Final answer
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FinalAnswer:
    """What the pipeline hands back to the caller."""

    answer_kind: AnswerKind
    score: Optional[float]
    choice: Optional[str]
    reasoning: str
    state_digest: str
    diagnostics: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "answer_kind": self.answer_kind.value,
            "score": self.score,
            "choice": self.choice,
            "reasoning": self.reasoning,
            "state_digest": self.state_digest,
            "diagnostics": self.diagnostics,
        }

    def to_json_bytes(self) -> bytes:
        return canonical_json(self.to_json_dict()).encode("utf-8")

    @classmethod
    def from_json_dict(cls, data: Mapping[str, Any]) -> "FinalAnswer":
        try:
            return cls(
                answer_kind=AnswerKind(data["answer_kind"]),
                score=None if data.get("score") is None else float(data["score"]),
                choice=data.get("choice"),
                reasoning=str(data.get("reasoning", "")),
                state_digest=str(data["state_digest"]),
                diagnostics=dict(data.get("diagnostics") or {}),
            )
        except KeyError as exc:
            raise SchemaError(f"final answer missing field {exc}") from exc
        except ValueError as exc:
            raise SchemaError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Canonical JSON helpers
# ---------------------------------------------------------------------------


def canonical_json(obj: Any) -> str:
    """Serialize with sorted keys and fixed separators; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def sha256_of_json(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()
