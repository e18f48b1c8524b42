"""Executor: runs the plan's enabled sub-tasks and accumulates evidence.

Four gated sub-tasks in fixed order: distortion detection, distortion
analysis, tool selection, tool execution. Each consults the model gateway
only when its gate is open, degrades deterministically when the model
misbehaves, and records a trace entry whether it ran or was skipped.
"""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from .calibration import FORM_STANDARD, default_params, logistic_map_full
from .context import QueryContext
from .gateway import ChatMessage, ChatRequest, GatewayError, ReplayMissError, VlmGateway
from .model import (
    GLOBAL_SCOPE,
    AnalysisEntry,
    DistortionCategory,
    IntermediateState,
    Plan,
    SEVERITIES,
    ToolScore,
    ToolStatus,
    TraceEntry,
    UnknownSeverityError,
    normalize_category,
    normalize_severity,
    validate_plan,
)
from .parsing import UnparseableError, extract_json_object
from .prompts import ANALYSIS, DETECTION, TOOL_SELECTION, load_prompt, render
from .tools.adapter_client import (
    AdapterError,
    AdapterScoreRequest,
    make_adapter_client,
)
from .tools.kernels import NATIVE_KERNELS
from .tools.registry import Registry, RegistryEmptyError, select_tool_deterministic

log = logging.getLogger(__name__)

FAILURE_SKIP = "skip"
FAILURE_ABORT = "abort"

_MODERATE = SEVERITIES[2]


class InvalidPlanError(ValueError):
    """run() was handed a plan that fails validation."""

    def __init__(self, violations):
        super().__init__("; ".join(v.message for v in violations))
        self.violations = list(violations)


class ToolExecutionAbortedError(RuntimeError):
    """A tool failed and the policy says abort."""


@dataclass(frozen=True)
class ExecutionPolicy:
    max_parallel_tools: int = 4
    per_tool_timeout_ms: int = 30000
    on_tool_failure: str = FAILURE_SKIP

    def __post_init__(self) -> None:
        if self.on_tool_failure not in (FAILURE_SKIP, FAILURE_ABORT):
            raise ValueError(f"on_tool_failure must be skip or abort: {self.on_tool_failure!r}")
        if self.max_parallel_tools < 1:
            raise ValueError("max_parallel_tools must be at least 1")


def display_name(distortion: DistortionCategory) -> str:
    if distortion.subtype:
        return f"{distortion.name} ({distortion.subtype})"
    return distortion.name


def parse_display_name(text: str) -> DistortionCategory:
    """Exact inverse of display_name."""
    match = re.fullmatch(r"(.+?) \((.+)\)", text)
    if match:
        return DistortionCategory(match.group(1), match.group(2))
    return DistortionCategory(text)


def _targets_of(plan: Plan, detections: dict) -> dict:
    return detections if detections else (plan.distortions or {})


def _render_distortion_set(targets: dict) -> str:
    return json.dumps(
        {key: [display_name(d) for d in entries] for key, entries in sorted(targets.items())},
        ensure_ascii=True,
    )


def render_tool_catalog(registry: Registry, mode) -> str:
    """One line per mode-compatible tool: name, description, strengths."""
    lines = []
    for descriptor in registry.by_mode(mode):
        strengths = ", ".join(
            f"{b.category}" + (f" ({b.subtype})" if b.subtype else "")
            for b in descriptor.best_at
        )
        suffix = f" Best at: {strengths}." if strengths else ""
        lines.append(f"- {descriptor.name}: {descriptor.description}{suffix}")
    return "\n".join(lines)


class Executor:
    """Runs executor sub-tasks against one gateway, registry, and policy."""

    def __init__(
        self,
        gateway: Optional[VlmGateway],
        registry: Registry,
        policy: ExecutionPolicy = ExecutionPolicy(),
        adapter_target=None,
        logistic_form: str = FORM_STANDARD,
        replay_strict: bool = False,
    ):
        self.gateway = gateway
        self.registry = registry
        self.policy = policy
        self.adapter_target = adapter_target
        self.logistic_form = logistic_form
        self.replay_strict = replay_strict
        self._adapter_clients: dict = {}

    # -- gateway plumbing ---------------------------------------------------

    def _chat(self, messages) -> Optional[str]:
        """One model call; None signals a degradable backend failure."""
        if self.gateway is None:
            return None
        try:
            return self.gateway.chat(ChatRequest(messages=tuple(messages))).text
        except ReplayMissError:
            if self.replay_strict:
                raise
            return None
        except GatewayError as exc:
            log.warning("gateway call failed: %s", exc)
            return None

    # -- distortion detection -----------------------------------------------

    def detect_distortions(self, ctx: QueryContext, plan: Plan) -> tuple[dict, dict]:
        """Ask the model which distortions deserve attention.

        Skipped entirely (returning the plan's own distortions) when the
        gate is closed. Scope keys outside the plan's scope and categories
        outside the canonical vocabulary are dropped with warnings; a reply
        that stays unusable after one retry degrades to an empty map.
        """
        if not plan.flags.distortion_detection:
            return plan.distortions or {}, {"skipped": True}

        messages = [
            ChatMessage(role="system", text=load_prompt(DETECTION)),
            ChatMessage(
                role="user",
                text=f"User's query: {ctx.query_text}",
                images=(ctx.distorted,),
            ),
        ]
        warnings: list[str] = []
        for attempt in range(2):
            text = self._chat(messages)
            if text is None:
                return {}, {"degraded": True, "warnings": ["gateway unavailable"]}
            try:
                obj = extract_json_object(text)
                raw_map = obj["distortion_set"]
                if not isinstance(raw_map, dict):
                    raise UnparseableError("distortion_set must be an object")
            except (UnparseableError, KeyError) as exc:
                if attempt == 0:
                    messages.append(
                        ChatMessage(
                            role="user",
                            text=(
                                f"Your previous reply could not be used: {exc}. "
                                "Reply again with only the JSON object."
                            ),
                        )
                    )
                    continue
                return {}, {"degraded": True, "warnings": [f"unusable detection reply: {exc}"]}
            detections = self._normalize_detection_map(raw_map, plan, warnings)
            return detections, {"warnings": warnings} if warnings else {}
        return {}, {"degraded": True}

    def _normalize_detection_map(self, raw_map: dict, plan: Plan, warnings: list) -> dict:
        allowed = {GLOBAL_SCOPE.lower(): GLOBAL_SCOPE}
        if plan.query_scope != GLOBAL_SCOPE:
            for name in plan.query_scope:
                allowed[name.lower()] = name
        out: dict = {}
        for key, entries in raw_map.items():
            scope_key = allowed.get(str(key).strip().lower())
            if scope_key is None:
                warnings.append(f"dropped detection scope {key!r}: not in query scope")
                continue
            if isinstance(entries, str):
                entries = [entries]
            if not isinstance(entries, list):
                warnings.append(f"dropped detection scope {key!r}: entries not a list")
                continue
            kept = []
            for name in entries:
                category = normalize_category(name) if isinstance(name, str) else None
                if category is None:
                    warnings.append(f"dropped detection entry {name!r}: unknown category")
                    continue
                d = DistortionCategory(category)
                if d not in kept:
                    kept.append(d)
            if kept:
                out[scope_key] = tuple(kept)
        return out

    # -- distortion analysis ------------------------------------------------

    def analyze_distortions(
        self, ctx: QueryContext, plan: Plan, detections: dict
    ) -> tuple[list, dict]:
        """Severity-rate every known distortion, one model call per scope.

        A scope whose reply stays unusable after one retry gets synthesized
        moderate-severity entries so downstream stages have something to
        reason about; those entries are flagged in the stage detail.
        """
        if not plan.flags.distortion_analysis:
            return [], {"skipped": True}
        targets = _targets_of(plan, detections)
        if not targets:
            return [], {"empty": True}

        entries: list[AnalysisEntry] = []
        warnings: list[str] = []
        synthesized = False
        for scope_key in sorted(targets):
            distortions = targets[scope_key]
            scope_entries = self._analyze_scope(ctx, scope_key, distortions, warnings)
            if scope_entries is None:
                synthesized = True
                warnings.append(f"analysis synthesized for scope {scope_key!r}")
                scope_entries = [
                    AnalysisEntry(
                        scope_key=scope_key,
                        distortion=d,
                        severity=_MODERATE,
                        rationale="unverified (analysis unavailable)",
                    )
                    for d in distortions
                ]
            entries.extend(scope_entries)
        detail: dict = {}
        if warnings:
            detail["warnings"] = warnings
        if synthesized:
            detail["degraded"] = True
        return entries, detail

    def _analyze_scope(
        self, ctx: QueryContext, scope_key: str, distortions, warnings: list
    ) -> Optional[list]:
        """One scope's analysis entries, or None when the model was unusable."""
        distortion_set = _render_distortion_set({scope_key: distortions})
        messages = [
            ChatMessage(
                role="system",
                text=render(load_prompt(ANALYSIS), distortion_set=distortion_set),
            ),
            ChatMessage(
                role="user",
                text=f"User's query: {ctx.query_text}",
                images=(ctx.distorted,),
            ),
        ]
        by_display = {display_name(d).lower(): d for d in distortions}
        by_category = {d.name.lower(): d for d in distortions}
        for attempt in range(2):
            text = self._chat(messages)
            if text is None:
                return None
            try:
                obj = extract_json_object(text)
                analysis_map = obj["distortion_analysis"]
                if not isinstance(analysis_map, dict):
                    raise UnparseableError("distortion_analysis must be an object")
            except (UnparseableError, KeyError) as exc:
                if attempt == 0:
                    messages.append(
                        ChatMessage(
                            role="user",
                            text=(
                                f"Your previous reply could not be used: {exc}. "
                                "Reply again with only the JSON object."
                            ),
                        )
                    )
                    continue
                return None
            raw_entries = self._scope_entries(analysis_map, scope_key)
            out = []
            for item in raw_entries:
                if not isinstance(item, dict):
                    warnings.append(f"dropped analysis entry {item!r}: not an object")
                    continue
                type_name = str(item.get("type", ""))
                distortion = (
                    by_display.get(type_name.strip().lower())
                    or by_category.get((normalize_category(type_name) or "").lower())
                )
                if distortion is None:
                    category = normalize_category(type_name)
                    if category is None:
                        warnings.append(
                            f"dropped analysis entry for {type_name!r}: unknown category"
                        )
                        continue
                    distortion = DistortionCategory(category)
                try:
                    severity = normalize_severity(item.get("severity"))
                except UnknownSeverityError as exc:
                    warnings.append(f"dropped analysis entry for {type_name!r}: {exc}")
                    continue
                rationale = str(item.get("explanation", "")).strip()
                if not rationale and severity.ordinal > 0:
                    rationale = "unverified (no rationale given)"
                out.append(
                    AnalysisEntry(
                        scope_key=scope_key,
                        distortion=distortion,
                        severity=severity,
                        rationale=rationale,
                    )
                )
            return out
        return None

    @staticmethod
    def _scope_entries(analysis_map: dict, scope_key: str) -> list:
        for key, value in analysis_map.items():
            if str(key).strip().lower() == scope_key.lower() and isinstance(value, list):
                return value
        if len(analysis_map) == 1:
            (value,) = analysis_map.values()
            if isinstance(value, list):
                return value
        return []

    # -- tool selection -----------------------------------------------------

    def select_tools(self, ctx: QueryContext, plan: Plan, detections: dict) -> tuple[dict, dict]:
        """Assign one registry tool per (scope, distortion).

        The model proposes assignments from the mode-compatible slice of the
        registry; unknown names, wrong-mode tools, and gaps are filled by
        the deterministic ranker, so this stage never fails outright.
        """
        if not plan.flags.tool_selection:
            return {}, {"skipped": True}
        if len(self.registry) == 0:
            raise RegistryEmptyError("tool selection needs a non-empty registry")
        targets = _targets_of(plan, detections)
        if not targets:
            return {}, {"empty": True}

        proposed = self._proposed_assignments(ctx, plan, targets)
        warnings: list[str] = []
        assignments: dict = {}
        for scope_key in sorted(targets):
            per_scope: dict = {}
            for distortion in targets[scope_key]:
                name = display_name(distortion)
                candidate = proposed.get(scope_key, {}).get(name.lower())
                tool = self._accept_tool(candidate, plan, warnings, name)
                if tool is None:
                    tool = select_tool_deterministic(
                        distortion, plan.reference_mode, self.registry
                    )
                per_scope[name] = tool
            assignments[scope_key] = per_scope
        detail: dict = {"proposed": bool(proposed)}
        if warnings:
            detail["warnings"] = warnings
        return assignments, detail

    def _accept_tool(self, candidate, plan: Plan, warnings: list, context: str) -> Optional[str]:
        if candidate is None:
            return None
        canonical = self.registry.resolve_name(str(candidate))
        if canonical is None:
            warnings.append(f"rejected tool {candidate!r} for {context}: not in registry")
            return None
        if not self.registry.get(canonical).matches_mode(plan.reference_mode):
            warnings.append(f"rejected tool {candidate!r} for {context}: wrong reference mode")
            return None
        return canonical

    def _proposed_assignments(self, ctx: QueryContext, plan: Plan, targets: dict) -> dict:
        """The model's raw tool picks, keyed by scope and lowercased name."""
        messages = [
            ChatMessage(
                role="system",
                text=render(
                    load_prompt(TOOL_SELECTION),
                    distortion_set=_render_distortion_set(targets),
                    tool_description=render_tool_catalog(self.registry, plan.reference_mode),
                ),
            ),
            ChatMessage(role="user", text=f"User's query: {ctx.query_text}"),
        ]
        for attempt in range(2):
            text = self._chat(messages)
            if text is None:
                return {}
            try:
                obj = extract_json_object(text)
                raw = obj["selected_tools"]
                if not isinstance(raw, dict):
                    raise UnparseableError("selected_tools must be an object")
            except (UnparseableError, KeyError) as exc:
                if attempt == 0:
                    messages.append(
                        ChatMessage(
                            role="user",
                            text=(
                                f"Your previous reply could not be used: {exc}. "
                                "Reply again with only the JSON object."
                            ),
                        )
                    )
                    continue
                return {}
            out: dict = {}
            scope_lookup = {key.lower(): key for key in targets}
            for key, mapping in raw.items():
                scope_key = scope_lookup.get(str(key).strip().lower())
                if scope_key is None or not isinstance(mapping, dict):
                    continue
                out[scope_key] = {
                    str(dname).strip().lower(): tool for dname, tool in mapping.items()
                }
            return out
        return {}

    # -- tool execution -----------------------------------------------------

    def execute_tools(
        self, ctx: QueryContext, plan: Plan, assignments: dict, detections: Optional[dict] = None
    ) -> tuple[list, dict]:
        """Run every distinct assigned or required tool once on the image pair."""
        if not plan.flags.tool_execute:
            return [], {"skipped": True}

        jobs: dict[str, list] = {}
        for scope_key in sorted(assignments):
            for name, tool in sorted(assignments[scope_key].items()):
                jobs.setdefault(tool, []).append((scope_key, name))
        unknown_required: list[str] = []
        for raw_name in plan.required_tools or ():
            canonical = self.registry.resolve_name(raw_name)
            if canonical is None:
                unknown_required.append(raw_name)
            else:
                jobs.setdefault(canonical, [])
        if not jobs and not unknown_required:
            return [], {"empty": True}

        contexts: dict[str, Optional[DistortionCategory]] = {}
        lookup = {}
        for scope_key, entries in _targets_of(plan, detections or {}).items():
            for d in entries:
                lookup[(scope_key, display_name(d))] = d
        for tool, pairs in jobs.items():
            distinct = {lookup.get(p) or parse_display_name(p[1]) for p in pairs}
            contexts[tool] = distinct.pop() if len(distinct) == 1 else None

        warnings: list[str] = []
        scores: list[ToolScore] = []
        failures = 0
        order = sorted(jobs)
        with ThreadPoolExecutor(max_workers=min(self.policy.max_parallel_tools, max(len(order), 1))) as pool:
            futures = {
                tool: pool.submit(self._run_tool, ctx, tool, contexts.get(tool), warnings)
                for tool in order
            }
            for tool in order:
                score = futures[tool].result()
                scores.append(score)
                if score.status == ToolStatus.FAILED:
                    failures += 1
                    if self.policy.on_tool_failure == FAILURE_ABORT:
                        raise ToolExecutionAbortedError(
                            f"tool {tool} failed: {score.reason}"
                        )
        for raw_name in unknown_required:
            failures += 1
            if self.policy.on_tool_failure == FAILURE_ABORT:
                raise ToolExecutionAbortedError(f"required tool {raw_name!r} is not registered")
            scores.append(
                ToolScore(
                    tool_name=raw_name,
                    raw_score=None,
                    calibrated_score=None,
                    distortion_context=None,
                    status=ToolStatus.FAILED,
                    reason="not in registry",
                )
            )
        scores.sort(key=lambda s: s.tool_name)
        detail: dict = {"tools": sorted(jobs) + unknown_required, "failures": failures}
        if warnings:
            detail["warnings"] = warnings
        return scores, detail

    def _run_tool(
        self,
        ctx: QueryContext,
        tool: str,
        context: Optional[DistortionCategory],
        warnings: list,
    ) -> ToolScore:
        def failed(reason: str) -> ToolScore:
            return ToolScore(
                tool_name=tool,
                raw_score=None,
                calibrated_score=None,
                distortion_context=context,
                status=ToolStatus.FAILED,
                reason=reason,
            )

        descriptor = self.registry.get(tool)
        needs_reference = descriptor.mode == "FR"
        if needs_reference and ctx.reference is None:
            return failed("full-reference tool without a reference image")

        try:
            if descriptor.binding.kind == "native":
                raw = self._run_native(ctx, descriptor, warnings)
            elif descriptor.binding.kind == "adapter":
                raw = self._run_adapter(ctx, descriptor, needs_reference)
            else:
                return failed("tool is not available in this installation")
        except _ToolFailure as exc:
            return failed(str(exc))

        calibration = logistic_map_full(
            raw, default_params(tool, self.registry, form=self.logistic_form)
        )
        if calibration.clamped:
            warnings.append(
                f"{tool}: calibrated value clamped "
                f"(pre-clamp {calibration.pre_clamp:.4f})"
            )
        return ToolScore(
            tool_name=tool,
            raw_score=raw,
            calibrated_score=calibration.value,
            distortion_context=context,
            status=ToolStatus.OK,
        )

    def _run_native(self, ctx: QueryContext, descriptor, warnings: list) -> float:
        kernel = NATIVE_KERNELS[descriptor.binding.kernel]
        reference = ctx.reference
        assert reference is not None
        if reference.size != ctx.distorted.size:
            warnings.append(
                f"{descriptor.name}: reference resampled from "
                f"{reference.size} to {ctx.distorted.size}"
            )
            reference = reference.resized_to(*ctx.distorted.size)
        try:
            return float(kernel(ctx.distorted.array, reference.array))
        except ValueError as exc:
            raise _ToolFailure(f"kernel error: {exc}") from exc

    def _run_adapter(self, ctx: QueryContext, descriptor, needs_reference: bool) -> float:
        target = descriptor.binding.endpoint or self.adapter_target
        if not target:
            raise _ToolFailure("no adapter endpoint configured")
        key = target if isinstance(target, str) else tuple(target)
        client = self._adapter_clients.get(key)
        if client is None:
            client = make_adapter_client(target, timeout_ms=self.policy.per_tool_timeout_ms)
            self._adapter_clients[key] = client
        request = AdapterScoreRequest(
            tool=descriptor.name,
            distorted=ctx.distorted.png_bytes(),
            distorted_format="png",
            reference=ctx.reference.png_bytes() if needs_reference and ctx.reference else None,
            reference_format="png" if needs_reference and ctx.reference else None,
            request_id=f"{descriptor.name}-{ctx.distorted.digest[:12]}",
        )
        try:
            response = client.score(request)
        except AdapterError as exc:
            raise _ToolFailure(f"adapter: {exc}") from exc
        if response.status != "ok":
            raise _ToolFailure(f"adapter reported: {response.message or 'error'}")
        return float(response.raw_score)

    def close(self) -> None:
        for client in self._adapter_clients.values():
            client.close()
        self._adapter_clients.clear()

    # -- the full pass ------------------------------------------------------

    def run(self, ctx: QueryContext, plan: Plan) -> IntermediateState:
        """Execute all four gates in order and return the evidence state."""
        violations = validate_plan(plan)
        if violations:
            raise InvalidPlanError(violations)
        state = IntermediateState(plan=plan)

        detections, detail = self._staged(
            state, "distortion_detection", lambda: self.detect_distortions(ctx, plan)
        )
        state.detections = detections

        analyses, _ = self._staged(
            state, "distortion_analysis", lambda: self.analyze_distortions(ctx, plan, detections)
        )
        state.analyses = analyses

        assignments, _ = self._staged(
            state, "tool_selection", lambda: self.select_tools(ctx, plan, detections)
        )
        state.assignments = assignments

        scores, _ = self._staged(
            state,
            "tool_execution",
            lambda: self.execute_tools(ctx, plan, assignments, detections),
        )
        state.scores = scores
        return state

    def _staged(self, state: IntermediateState, stage: str, thunk):
        calls_before = self.gateway.thread_call_count if self.gateway else 0
        started = time.monotonic()
        result, detail = thunk()
        wall_ms = (time.monotonic() - started) * 1000.0
        detail = dict(detail)
        detail["gateway_calls"] = (
            self.gateway.thread_call_count if self.gateway else 0
        ) - calls_before
        state.trace.append(
            TraceEntry(
                stage=stage,
                wall_ms=wall_ms,
                ok=not detail.get("degraded", False),
                detail=detail,
            )
        )
        return result, detail


class _ToolFailure(Exception):
    """Internal: converts any tool problem into a Failed score."""
