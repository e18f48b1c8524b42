"""Planning: turning a query into a validated assessment plan.

The model proposes a plan; a deterministic rule table has the final word
on the four executor gates and the reference mode, so a confused model can
steer vocabulary (scope, distortions, tools) but never the control flow.
A fully rule-based fallback planner covers gateway failures and offline
runs using a keyword lexicon, the same rule table, and nothing else.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from importlib import resources
from typing import Optional

from .context import QueryContext, QueryEmptyError
from .gateway import ChatMessage, ChatRequest, GatewayError, ReplayMissError, VlmGateway
from .model import (
    GLOBAL_SCOPE,
    DistortionCategory,
    DistortionSource,
    Plan,
    PlanFlags,
    QueryType,
    ReferenceMode,
    SchemaError,
    normalize_category,
    validate_plan,
)
from .parsing import UnparseableError, extract_json_object
from .prompts import PLANNER, load_prompt

log = logging.getLogger(__name__)

_MAX_REGIONS = 5


@dataclass(frozen=True)
class PlannerRuleInputs:
    """The five booleans the rule table consumes."""

    is_iqa: bool
    mentions_distortions: bool
    mentions_region: bool
    mentions_tool: bool
    has_reference: bool


def derive_rule_inputs(plan: Plan, has_reference: bool) -> PlannerRuleInputs:
    return PlannerRuleInputs(
        is_iqa=plan.query_type == QueryType.IQA,
        mentions_distortions=bool(plan.distortions),
        mentions_region=plan.query_scope != GLOBAL_SCOPE,
        mentions_tool=bool(plan.required_tools),
        has_reference=has_reference,
    )


def apply_rule_table(draft: Plan, inputs: PlannerRuleInputs) -> Plan:
    """Force the gates, the reference mode, and the distortion source.

    The draft's own flag values are never consulted: the table is a pure
    function of ``inputs``. The distortion source is reconciled with the
    distortion map so an inconsistent draft cannot produce an invalid plan.
    """
    if not inputs.is_iqa:
        flags = PlanFlags(False, False, False, False)
    else:
        detection = not inputs.mentions_distortions
        analysis = True
        if inputs.mentions_tool and inputs.mentions_region:
            selection, execute = False, True
        elif inputs.mentions_region:
            selection, execute = False, False
        elif inputs.mentions_tool:
            selection, execute = False, True
        else:
            selection, execute = True, True
        flags = PlanFlags(detection, analysis, selection, execute)

    mode = ReferenceMode.FULL_REFERENCE if inputs.has_reference else ReferenceMode.NO_REFERENCE
    source = DistortionSource.EXPLICIT if draft.distortions else DistortionSource.INFERRED
    return replace(
        draft,
        flags=flags,
        reference_mode=mode,
        distortion_source=source,
        distortions=draft.distortions or None,
    )


# ---------------------------------------------------------------------------
# Lexicon
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Lexicon:
    distortion_keywords: dict
    quality_keywords: frozenset
    aesthetic_keywords: frozenset
    region_determiners: tuple
    region_stopwords: frozenset

    @classmethod
    def from_json_dict(cls, data: dict) -> "Lexicon":
        return cls(
            distortion_keywords=dict(data["distortion_keywords"]),
            quality_keywords=frozenset(data["quality_keywords"]),
            aesthetic_keywords=frozenset(data["aesthetic_keywords"]),
            region_determiners=tuple(data["region_determiners"]),
            region_stopwords=frozenset(data["region_stopwords"]),
        )


@lru_cache(maxsize=1)
def load_default_lexicon() -> Lexicon:
    text = resources.files("iqa_agent").joinpath("assets/lexicon.json").read_text("utf-8")
    return Lexicon.from_json_dict(json.loads(text))


def _keyword_present(keyword: str, lowered: str) -> bool:
    pattern = r"(?<![a-z0-9])" + re.escape(keyword) + r"(?![a-z0-9])"
    return re.search(pattern, lowered) is not None


def _find_distortions(lowered: str, lexicon: Lexicon) -> list[DistortionCategory]:
    """All distortion keywords present, most specific spelling per category."""
    hits: list[tuple[str, Optional[str]]] = []
    for keyword in sorted(lexicon.distortion_keywords, key=len, reverse=True):
        if _keyword_present(keyword, lowered):
            entry = lexicon.distortion_keywords[keyword]
            hits.append((entry["category"], entry.get("subtype")))
    by_category: dict[str, list[Optional[str]]] = {}
    for category, subtype in hits:
        by_category.setdefault(category, [])
        if subtype and subtype not in by_category[category]:
            by_category[category].append(subtype)
    out = []
    for category in sorted(by_category):
        subtypes = by_category[category]
        if subtypes:
            out.extend(DistortionCategory(category, s) for s in subtypes)
        else:
            out.append(DistortionCategory(category))
    return out


def _find_regions(lowered: str, lexicon: Lexicon) -> list[str]:
    """Conservative noun capture: determiner followed by up to two words."""
    blocked = set(lexicon.region_stopwords)
    blocked.update(lexicon.quality_keywords)
    blocked.update(lexicon.aesthetic_keywords)
    for keyword in lexicon.distortion_keywords:
        blocked.update(keyword.split())
    determiners = "|".join(re.escape(d) for d in lexicon.region_determiners)
    pattern = rf"\b(?:{determiners})\s+([a-z][a-z\-]*(?:\s+[a-z][a-z\-]*)?)"
    regions: list[str] = []
    for match in re.finditer(pattern, lowered):
        words = [w for w in match.group(1).split() if w not in blocked]
        if not words:
            continue
        name = " ".join(words)
        if name not in regions:
            regions.append(name)
    return regions[:_MAX_REGIONS]


def _find_tools(query: str, registry) -> list[str]:
    if registry is None:
        return []
    found = []
    candidates = list(registry.names())
    from .tools.registry import NAME_ALIASES

    candidates.extend(NAME_ALIASES)
    for name in candidates:
        pattern = r"(?<![A-Za-z0-9])" + re.escape(name) + r"(?![A-Za-z0-9])"
        if re.search(pattern, query, flags=re.IGNORECASE):
            canonical = registry.resolve_name(name)
            if canonical and canonical not in found:
                found.append(canonical)
    return found


def fallback_plan(
    ctx: QueryContext,
    registry=None,
    lexicon: Optional[Lexicon] = None,
) -> Plan:
    """Plan a query with no model at all.

    Distortion and aesthetic keywords decide the query type, a determiner
    pattern finds region mentions, registry names are scanned for explicit
    tool requests, and the shared rule table derives the gates. The result
    always passes validate_plan.
    """
    query = ctx.query_text
    if not query or not query.strip():
        raise QueryEmptyError("cannot plan an empty query")
    lexicon = lexicon or load_default_lexicon()
    lowered = query.lower()

    distortions = _find_distortions(lowered, lexicon)
    mentions_quality = any(_keyword_present(k, lowered) for k in lexicon.quality_keywords)
    mentions_aesthetic = any(_keyword_present(k, lowered) for k in lexicon.aesthetic_keywords)
    if distortions or mentions_quality:
        query_type = QueryType.IQA
    elif mentions_aesthetic:
        query_type = QueryType.OTHER
    else:
        query_type = QueryType.IQA

    regions = _find_regions(lowered, lexicon)
    scope = tuple(regions) if regions else GLOBAL_SCOPE

    distortion_map = None
    if distortions:
        key = regions[0] if len(regions) == 1 else GLOBAL_SCOPE
        distortion_map = {key: tuple(distortions)}

    tools = _find_tools(query, registry)

    draft = Plan(
        query_type=query_type,
        query_scope=scope,
        distortions=distortion_map,
        required_tools=tuple(tools) or None,
    )
    draft = _merge_constraints(draft, ctx)
    return apply_rule_table(draft, derive_rule_inputs(draft, ctx.has_reference))


# ---------------------------------------------------------------------------
# Gateway path
# ---------------------------------------------------------------------------


def build_planner_prompt(ctx: QueryContext) -> tuple:
    """System template verbatim plus the query (and image) as user message."""
    if not ctx.query_text or not ctx.query_text.strip():
        raise QueryEmptyError("cannot plan an empty query")
    system = ChatMessage(role="system", text=load_prompt(PLANNER))
    user = ChatMessage(
        role="user",
        text=f"User's query: {ctx.query_text}",
        images=(ctx.distorted,),
    )
    return (system, user)


def _normalize_distortion_names(raw_map, lexicon: Lexicon) -> Optional[dict]:
    """Map model-emitted distortion names onto the canonical vocabulary.

    Category names pass through; known subtype spellings become category
    plus subtype; anything else is dropped (the validator will complain if
    that leaves an explicit plan empty).
    """
    if not raw_map:
        return None
    out = {}
    for key, entries in raw_map.items():
        kept = []
        for entry in entries:
            name = entry.name
            canonical = normalize_category(name)
            if canonical:
                kept.append(DistortionCategory(canonical, entry.subtype))
                continue
            keyword = lexicon.distortion_keywords.get(" ".join(name.lower().split()))
            if keyword:
                kept.append(DistortionCategory(keyword["category"], keyword.get("subtype")))
                continue
            log.debug("dropping unknown distortion name %r", name)
        if kept:
            # Preserve first-seen order while deduplicating.
            seen = {}
            for d in kept:
                seen.setdefault((d.name, d.subtype), d)
            out[key] = tuple(seen.values())
    return out or None


def parse_plan(text: str, lexicon: Optional[Lexicon] = None) -> Plan:
    """Extract and normalize a Plan from model output (not yet rule-checked)."""
    lexicon = lexicon or load_default_lexicon()
    obj = extract_json_object(text)
    plan = Plan.from_json_dict(obj, strict=False)
    normalized = _normalize_distortion_names(plan.distortions, lexicon)
    if normalized != plan.distortions:
        plan = replace(plan, distortions=normalized)
    return plan


def _merge_constraints(draft: Plan, ctx: QueryContext) -> Plan:
    if not ctx.tool_constraints:
        return draft
    merged = dict.fromkeys((draft.required_tools or ()) + tuple(ctx.tool_constraints))
    return replace(draft, required_tools=tuple(merged))


def finalize_draft(draft: Plan, ctx: QueryContext) -> Plan:
    draft = _merge_constraints(draft, ctx)
    return apply_rule_table(draft, derive_rule_inputs(draft, ctx.has_reference))


def make_plan(
    ctx: QueryContext,
    gateway: Optional[VlmGateway],
    registry=None,
    lexicon: Optional[Lexicon] = None,
    extra_note: Optional[str] = None,
    replay_strict: bool = False,
) -> tuple[Plan, dict]:
    """Plan via the gateway with one repair retry, falling back to rules.

    Returns the plan plus a detail dict describing how it was obtained.
    Every returned plan passes validate_plan: the rule table plus source
    reconciliation make gateway drafts structurally valid, and drafts that
    still fail validation (bad scope keys, unknown categories) get one
    corrective retry before the rule-based fallback takes over.
    """
    if not ctx.query_text or not ctx.query_text.strip():
        raise QueryEmptyError("cannot plan an empty query")
    lexicon = lexicon or load_default_lexicon()
    detail: dict = {"source": "fallback", "attempts": 0}
    if gateway is None:
        plan = fallback_plan(ctx, registry=registry, lexicon=lexicon)
        detail["reason"] = "no gateway configured"
        return plan, detail

    messages = list(build_planner_prompt(ctx))
    if extra_note:
        messages.append(ChatMessage(role="user", text=extra_note))
    problem = ""
    for attempt in range(2):
        detail["attempts"] = attempt + 1
        try:
            response = gateway.chat(ChatRequest(messages=tuple(messages)))
        except ReplayMissError:
            if replay_strict:
                raise
            detail["reason"] = "replay miss"
            return fallback_plan(ctx, registry=registry, lexicon=lexicon), detail
        except GatewayError as exc:
            detail["reason"] = f"gateway error: {exc}"
            return fallback_plan(ctx, registry=registry, lexicon=lexicon), detail
        try:
            draft = parse_plan(response.text, lexicon=lexicon)
        except (UnparseableError, SchemaError) as exc:
            problem = str(exc)
            log.debug("plan parse failed (attempt %d): %s", attempt + 1, problem)
            messages.append(
                ChatMessage(
                    role="user",
                    text=(
                        f"Your previous reply could not be used: {problem}. "
                        "Reply again with only the JSON plan object."
                    ),
                )
            )
            continue
        plan = finalize_draft(draft, ctx)
        violations = validate_plan(plan)
        if not violations:
            detail["source"] = "gateway"
            return plan, detail
        problem = "; ".join(v.message for v in violations)
        detail["violations"] = [v.code for v in violations]
        messages.append(
            ChatMessage(
                role="user",
                text=(
                    f"Your previous plan was invalid: {problem}. "
                    "Reply again with only the corrected JSON plan object."
                ),
            )
        )
    detail["reason"] = f"unusable model plans: {problem}"
    return fallback_plan(ctx, registry=registry, lexicon=lexicon), detail
