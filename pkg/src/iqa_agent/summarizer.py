"""Summarizer: sufficiency checking, bounded reflection, fusion, answers.

The fused score combines the mean of calibrated tool scores with the
model's distribution over the five quality levels: Gaussian weights
centered on the tool mean are multiplied with the softmaxed level
probabilities and summed over levels. The normalized variant divides by
the total mass so the result stays on the 1..5 scale; the literal variant
returns the raw weighted sum.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

from .context import QueryContext
from .gateway import (
    BackendUnsupportedError,
    ChatMessage,
    ChatRequest,
    GatewayError,
    ReplayMissError,
    VlmGateway,
    level_logprobs,
)
from .model import (
    GLOBAL_SCOPE,
    AnswerKind,
    DistortionSource,
    FinalAnswer,
    IntermediateState,
    Plan,
    PlanFlags,
    QUALITY_LEVELS,
    QueryType,
    ToolStatus,
    TraceEntry,
    letter_for_level,
    nearest_level,
)
from .parsing import NoChoiceFoundError, UnparseableError, extract_json_object, parse_choice
from .prompts import SUMMARIZER_INTERPRETATION, SUMMARIZER_SCORE, load_prompt, render

log = logging.getLogger(__name__)

MODE_LITERAL = "literal"
MODE_NORMALIZED = "normalized"

_FUSION_MODES = (MODE_LITERAL, MODE_NORMALIZED)

INSUFFICIENT_PREAMBLE = "Insufficient evidence"

_LEVEL_VALUES = tuple(float(level.value) for level in QUALITY_LEVELS)


class EmptyScoresError(ValueError):
    """Fusion was asked to run without a single usable tool score."""


class FusionInputError(ValueError):
    """Fusion inputs are structurally wrong (missing levels, bad eta)."""


# ---------------------------------------------------------------------------
# Score fusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FusionInputs:
    """Calibrated tool scores plus the level log-probability table."""

    tool_scores: tuple
    level_logprobs: dict
    eta: float = 1.0


def _softmax(logps: Sequence[float]) -> list[float]:
    shift = max(logps)
    exps = [math.exp(lp - shift) for lp in logps]
    total = sum(exps)
    return [e / total for e in exps]


def fuse_scores(inputs: FusionInputs, mode: str = MODE_NORMALIZED) -> tuple[float, dict]:
    """Fuse tool scores with the level distribution.

    Returns the fused value for the requested mode plus a diagnostics dict
    carrying the tool mean, both weight vectors, and both mode values.
    """
    if mode not in _FUSION_MODES:
        raise ValueError(f"unknown fusion mode: {mode!r}")
    if not inputs.tool_scores:
        raise EmptyScoresError("fusion needs at least one tool score")
    if not (inputs.eta > 0.0 and math.isfinite(inputs.eta)):
        raise FusionInputError(f"eta must be a positive finite number, got {inputs.eta!r}")
    missing = [level for level in QUALITY_LEVELS if level not in inputs.level_logprobs]
    if missing:
        raise FusionInputError(
            f"level_logprobs must cover all five levels, missing {[m.label for m in missing]}"
        )
    scores = [float(s) for s in inputs.tool_scores]
    if not all(math.isfinite(s) for s in scores):
        raise FusionInputError("tool scores must be finite")

    q_bar = sum(scores) / len(scores)
    raw_weights = [math.exp(-inputs.eta * (q_bar - c) ** 2) for c in _LEVEL_VALUES]
    total_weight = sum(raw_weights)
    alpha = [w / total_weight for w in raw_weights]
    p = _softmax([float(inputs.level_logprobs[level]) for level in QUALITY_LEVELS])

    q_literal = sum(a * pc * c for a, pc, c in zip(alpha, p, _LEVEL_VALUES))
    mass = sum(a * pc for a, pc in zip(alpha, p))
    q_normalized = q_literal / mass

    diagnostics = {
        "q_bar": q_bar,
        "eta": inputs.eta,
        "alpha": {str(int(c)): a for c, a in zip(_LEVEL_VALUES, alpha)},
        "p": {str(int(c)): pc for c, pc in zip(_LEVEL_VALUES, p)},
        "q_literal": q_literal,
        "q_normalized": q_normalized,
        "mode": mode,
    }
    value = q_normalized if mode == MODE_NORMALIZED else q_literal
    return value, diagnostics


def uniform_level_average(logprobs: dict) -> float:
    """Expected level under the softmaxed distribution alone.

    This is the tool-free baseline: no Gaussian weighting, just the
    probability-weighted mean of the level values.
    """
    missing = [level for level in QUALITY_LEVELS if level not in logprobs]
    if missing:
        raise FusionInputError(
            f"level_logprobs must cover all five levels, missing {[m.label for m in missing]}"
        )
    p = _softmax([float(logprobs[level]) for level in QUALITY_LEVELS])
    return sum(pc * c for pc, c in zip(p, _LEVEL_VALUES))


# ---------------------------------------------------------------------------
# Sufficiency
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SufficiencyReport:
    sufficient: bool
    missing: tuple = ()


def _scope_coverage_missing(state: IntermediateState) -> list[str]:
    covered = {entry.scope_key for entry in state.analyses}
    scope = state.plan.query_scope
    wanted = [GLOBAL_SCOPE] if scope == GLOBAL_SCOPE else list(scope)
    out = []
    for key in wanted:
        if key not in covered and not (key != GLOBAL_SCOPE and GLOBAL_SCOPE in covered):
            out.append(f"analysis:{key}")
    return out


def sufficiency_check(
    state: IntermediateState,
    answer_kind: AnswerKind,
    logprobs_available: bool = False,
) -> SufficiencyReport:
    """Deterministic checklist over the accumulated evidence.

    Score answers need a usable tool score or a live level-probability
    source; free-text answers need analysis coverage of the query scope;
    choice answers accept either. Non-IQA queries are always sufficient
    because the summarizer interprets the image directly.
    """
    if state.plan.query_type == QueryType.OTHER:
        return SufficiencyReport(sufficient=True)

    has_score = bool(state.ok_scores())
    missing: list[str] = []
    if answer_kind == AnswerKind.SCORE:
        if has_score or logprobs_available:
            return SufficiencyReport(sufficient=True)
        missing.append(f"toolscore:{GLOBAL_SCOPE}")
    elif answer_kind == AnswerKind.CHOICE:
        if has_score or logprobs_available or state.analyses:
            return SufficiencyReport(sufficient=True)
        missing.append(f"toolscore:{GLOBAL_SCOPE}")
        missing.extend(_scope_coverage_missing(state))
    else:
        missing.extend(_scope_coverage_missing(state))
        if not missing:
            return SufficiencyReport(sufficient=True)
    return SufficiencyReport(sufficient=False, missing=tuple(missing))


# ---------------------------------------------------------------------------
# Reflection
# ---------------------------------------------------------------------------


def _plan_for_reflection(base: Plan, state: IntermediateState, missing: Sequence[str]) -> Plan:
    """A minimal plan that re-runs only the sub-tasks the gaps implicate.

    Evidence already gathered (plan distortions plus detections) is carried
    forward as explicit distortions so detection is not repeated; regional
    scopes never get tool execution forced on them.
    """
    need_analysis = any(m.startswith("analysis:") for m in missing)
    need_scores = any(m.startswith("toolscore:") for m in missing)

    allowed = {GLOBAL_SCOPE}
    if base.query_scope != GLOBAL_SCOPE:
        allowed.update(base.query_scope)
    distortions = {
        key: entries for key, entries in (base.distortions or {}).items() if key in allowed
    }
    for key, entries in state.detections.items():
        if key in allowed:
            distortions.setdefault(key, tuple(entries))

    if distortions:
        source = DistortionSource.EXPLICIT
        detection = False
    else:
        source = DistortionSource.INFERRED
        detection = True

    regional = base.query_scope != GLOBAL_SCOPE
    run_tools = need_scores and not regional
    flags = PlanFlags(
        distortion_detection=detection,
        distortion_analysis=need_analysis,
        tool_selection=run_tools and not base.required_tools,
        tool_execute=run_tools,
    )
    return replace(
        base,
        distortion_source=source,
        distortions=distortions or None,
        flags=flags,
    )


def _merge_states(base: IntermediateState, extra: IntermediateState, round_no: int) -> None:
    for key, entries in extra.detections.items():
        merged = list(base.detections.get(key, ()))
        for d in entries:
            if d not in merged:
                merged.append(d)
        base.detections[key] = tuple(merged)

    seen = {(a.scope_key, a.distortion) for a in base.analyses}
    for entry in extra.analyses:
        if (entry.scope_key, entry.distortion) not in seen:
            base.analyses.append(entry)
            seen.add((entry.scope_key, entry.distortion))

    for scope_key, per_scope in extra.assignments.items():
        target = base.assignments.setdefault(scope_key, {})
        for name, tool in per_scope.items():
            target.setdefault(name, tool)

    by_name = {s.tool_name: s for s in base.scores}
    for score in extra.scores:
        current = by_name.get(score.tool_name)
        if current is None or (
            current.status == ToolStatus.FAILED and score.status == ToolStatus.OK
        ):
            by_name[score.tool_name] = score
    base.scores = sorted(by_name.values(), key=lambda s: s.tool_name)

    for entry in extra.trace:
        base.trace.append(
            TraceEntry(
                stage=f"reflect{round_no}.{entry.stage}",
                wall_ms=entry.wall_ms,
                ok=entry.ok,
                detail=entry.detail,
            )
        )


def reflect_loop(
    ctx: QueryContext,
    state: IntermediateState,
    executor,
    answer_kind: AnswerKind,
    replan: Optional[Callable[[str], Optional[Plan]]] = None,
    max_rounds: int = 2,
    logprobs_available: bool = False,
) -> tuple[IntermediateState, SufficiencyReport, int]:
    """Replan and re-execute until the evidence suffices or rounds run out.

    ``replan`` receives a note describing the gaps and may return a revised
    plan (or None to keep the current one); the revised plan is then clamped
    to the implicated sub-tasks before execution. The loop is a no-op when
    the state is already sufficient.
    """
    report = sufficiency_check(state, answer_kind, logprobs_available)
    rounds = 0
    while not report.sufficient and rounds < max_rounds:
        rounds += 1
        note = (
            "The evidence gathered so far is insufficient. Missing items: "
            + ", ".join(report.missing)
            + ". Revise the plan to close these gaps."
        )
        base = state.plan
        if replan is not None:
            try:
                revised = replan(note)
            except GatewayError:
                revised = None
            if revised is not None:
                base = revised
        round_plan = _plan_for_reflection(base, state, report.missing)
        if not round_plan.flags.any():
            break
        try:
            extra = executor.run(ctx, round_plan)
        except ValueError as exc:
            log.warning("reflection round %d could not run: %s", rounds, exc)
            break
        _merge_states(state, extra, rounds)
        report = sufficiency_check(state, answer_kind, logprobs_available)
    return state, report, rounds


# ---------------------------------------------------------------------------
# Answer assembly
# ---------------------------------------------------------------------------


def serialize_analyses(state: IntermediateState) -> str:
    """The {distortion_analysis} slot: scope -> list of typed entries."""
    grouped: dict = {}
    for entry in state.analyses:
        grouped.setdefault(entry.scope_key, []).append(
            {
                "type": (
                    f"{entry.distortion.name} ({entry.distortion.subtype})"
                    if entry.distortion.subtype
                    else entry.distortion.name
                ),
                "severity": entry.severity.label,
                "explanation": entry.rationale,
            }
        )
    if not grouped:
        return "none available"
    return json.dumps({k: grouped[k] for k in sorted(grouped)}, ensure_ascii=True)


def serialize_scores(state: IntermediateState) -> str:
    """The {tool_response} slot: tool -> calibrated score, failures flagged."""
    table: dict = {}
    for score in sorted(state.scores, key=lambda s: s.tool_name):
        if score.status == ToolStatus.OK:
            table[score.tool_name] = round(score.calibrated_score, 4)
        else:
            table[score.tool_name] = f"failed ({score.reason or 'unspecified'})"
    if not table:
        return "none available"
    return json.dumps(table, ensure_ascii=True)


def _score_messages(ctx: QueryContext, state: IntermediateState) -> list:
    system = render(
        load_prompt(SUMMARIZER_SCORE),
        tool_response=serialize_scores(state),
        distortion_analysis=serialize_analyses(state),
    )
    return [
        ChatMessage(role="system", text=system),
        ChatMessage(
            role="user",
            text=f"User's query: {ctx.query_text}",
            images=(ctx.distorted,),
        ),
    ]


def _interpretation_messages(
    ctx: QueryContext, state: IntermediateState, options: Optional[Sequence[str]]
) -> list:
    system = render(
        load_prompt(SUMMARIZER_INTERPRETATION),
        tool_response=serialize_scores(state),
        distortion_analysis=serialize_analyses(state),
    )
    user = f"User's query: {ctx.query_text}"
    if options:
        user += "\nOptions:\n" + "\n".join(options)
    return [
        ChatMessage(role="system", text=system),
        ChatMessage(role="user", text=user, images=(ctx.distorted,)),
    ]


def _top_analyses(state: IntermediateState, limit: int = 3) -> list:
    ranked = sorted(
        state.analyses,
        key=lambda a: (-a.severity.ordinal, a.scope_key, a.distortion.name),
    )
    return ranked[:limit]


def _score_reasoning(state: IntermediateState, fused: float, mode_note: str) -> str:
    level = nearest_level(fused)
    parts = [f"Fused quality score {fused:.4f} ({level.label}; {mode_note})."]
    ok = state.ok_scores()
    if ok:
        listing = ", ".join(f"{s.tool_name} {s.calibrated_score:.4f}" for s in ok)
        parts.append(f"Tool scores: {listing}.")
    failed = [s for s in state.scores if s.status == ToolStatus.FAILED]
    if failed:
        parts.append(
            "Failed tools: " + ", ".join(sorted(s.tool_name for s in failed)) + "."
        )
    top = _top_analyses(state)
    if top:
        described = "; ".join(
            f"{a.distortion.name} ({a.severity.label}"
            + (f", {a.scope_key}" if a.scope_key != GLOBAL_SCOPE else "")
            + ")"
            for a in top
        )
        parts.append(f"Most salient distortions: {described}.")
    return " ".join(parts)


def _answer_score(
    ctx: QueryContext,
    state: IntermediateState,
    gateway: Optional[VlmGateway],
    fusion_mode: str,
    eta: float,
    preamble: str,
) -> tuple[Optional[float], str, dict]:
    ok_values = tuple(s.calibrated_score for s in state.ok_scores())
    logprobs = None
    if gateway is not None:
        try:
            logprobs = level_logprobs(gateway, _score_messages(ctx, state))
        except (BackendUnsupportedError, GatewayError) as exc:
            log.warning("no level distribution available: %s", exc)

    if logprobs is not None and ok_values:
        value, diagnostics = fuse_scores(
            FusionInputs(tool_scores=ok_values, level_logprobs=logprobs, eta=eta),
            mode=fusion_mode,
        )
        reasoning = _score_reasoning(state, value, f"{fusion_mode} fusion")
        return value, reasoning, diagnostics
    if logprobs is not None:
        value = uniform_level_average(logprobs)
        diagnostics = {"mode": "vlm_only", "q_uniform": value}
        reasoning = _score_reasoning(state, value, "level distribution only")
        return value, reasoning, diagnostics
    if ok_values:
        value = sum(ok_values) / len(ok_values)
        diagnostics = {"mode": "tools_only", "q_bar": value}
        reasoning = _score_reasoning(state, value, "tool mean only")
        return value, reasoning, diagnostics
    reasoning = f"{preamble or INSUFFICIENT_PREAMBLE}: no tool scores and no level distribution."
    return None, reasoning, {"mode": "none"}


def _answer_choice(
    ctx: QueryContext,
    state: IntermediateState,
    gateway: Optional[VlmGateway],
    options: Sequence[str],
) -> tuple[Optional[str], str, dict]:
    messages = _interpretation_messages(ctx, state, options)
    letter: Optional[str] = None
    reasoning = ""
    diagnostics: dict = {}
    if gateway is not None:
        for attempt in range(2):
            try:
                response = gateway.chat(ChatRequest(messages=tuple(messages)))
            except GatewayError as exc:
                log.warning("choice call failed: %s", exc)
                break
            text = response.text
            try:
                obj = extract_json_object(text)
                reasoning = str(obj.get("quality_reasoning", "")).strip()
            except UnparseableError:
                pass
            try:
                letter = parse_choice(text, options)
            except NoChoiceFoundError:
                if not reasoning:
                    reasoning = text.strip()
                if attempt == 0:
                    messages = list(messages) + [
                        ChatMessage(
                            role="user",
                            text=(
                                "Your previous reply named no option. Answer with "
                                "exactly one option letter."
                            ),
                        )
                    ]
                continue
            if not reasoning:
                reasoning = text.strip()
            break

    if letter is None:
        # Degraded path: point at the level nearest the fused or mean score.
        fallback = None
        ok_values = tuple(s.calibrated_score for s in state.ok_scores())
        if ok_values:
            fallback = sum(ok_values) / len(ok_values)
        if fallback is not None:
            candidate = letter_for_level(nearest_level(fallback))
            valid = {opt.strip()[0].upper() for opt in options if opt.strip()}
            letter = candidate if candidate in valid else sorted(valid)[0]
            diagnostics["choice_fallback"] = "nearest_level"
            reasoning = reasoning or (
                f"Option inferred from the mean calibrated tool score {fallback:.4f}."
            )
        else:
            diagnostics["choice_fallback"] = "unanswered"
            reasoning = reasoning or "No model reply and no tool scores to infer from."
    return letter, reasoning, diagnostics


def _answer_free_text(
    ctx: QueryContext,
    state: IntermediateState,
    gateway: Optional[VlmGateway],
    preamble: str,
) -> tuple[str, dict]:
    if gateway is not None:
        try:
            response = gateway.chat(
                ChatRequest(messages=tuple(_interpretation_messages(ctx, state, None)))
            )
            text = response.text
            try:
                obj = extract_json_object(text)
                reasoning = str(
                    obj.get("quality_reasoning") or obj.get("final_answer") or ""
                ).strip()
                if reasoning:
                    return reasoning, {"mode": "model"}
            except UnparseableError:
                pass
            if text.strip():
                return text.strip(), {"mode": "model"}
        except GatewayError as exc:
            log.warning("free-text call failed: %s", exc)

    if state.analyses:
        described = "; ".join(
            f"{a.distortion.name} ({a.severity.label}"
            + (f", {a.scope_key}" if a.scope_key != GLOBAL_SCOPE else "")
            + f"): {a.rationale}"
            for a in _top_analyses(state, limit=5)
        )
        text = f"Observed distortions: {described}"
        if preamble:
            text = f"{preamble}. {text}"
        return text, {"mode": "analyses_only"}
    base = preamble or "No model access and no gathered evidence to describe."
    return f"{base}.", {"mode": "none"}


def generate_answer(
    ctx: QueryContext,
    state: IntermediateState,
    answer_kind: AnswerKind,
    gateway: Optional[VlmGateway] = None,
    options: Optional[Sequence[str]] = None,
    fusion_mode: str = MODE_NORMALIZED,
    eta: float = 1.0,
    sufficiency: Optional[SufficiencyReport] = None,
    reflect_rounds: int = 0,
) -> FinalAnswer:
    """Assemble the final answer for one assessment run."""
    preamble = ""
    if sufficiency is not None and not sufficiency.sufficient:
        preamble = f"{INSUFFICIENT_PREAMBLE} (missing: {', '.join(sufficiency.missing)})"

    score: Optional[float] = None
    choice: Optional[str] = None
    diagnostics: dict = {}

    if answer_kind == AnswerKind.SCORE:
        score, reasoning, diagnostics = _answer_score(
            ctx, state, gateway, fusion_mode, eta, preamble
        )
        if preamble and score is not None:
            reasoning = f"{preamble}. {reasoning}"
    elif answer_kind == AnswerKind.CHOICE:
        if not options:
            raise ValueError("a Choice answer needs the option list")
        choice, reasoning, diagnostics = _answer_choice(ctx, state, gateway, options)
        if preamble:
            reasoning = f"{preamble}. {reasoning}"
    else:
        reasoning, diagnostics = _answer_free_text(ctx, state, gateway, preamble)

    if sufficiency is not None:
        diagnostics = dict(diagnostics)
        diagnostics["sufficient"] = sufficiency.sufficient
        if sufficiency.missing:
            diagnostics["missing"] = list(sufficiency.missing)
        if reflect_rounds:
            diagnostics["reflect_rounds"] = reflect_rounds

    return FinalAnswer(
        answer_kind=answer_kind,
        score=score,
        choice=choice,
        reasoning=reasoning,
        state_digest=state.state_digest(),
        diagnostics=diagnostics,
    )
