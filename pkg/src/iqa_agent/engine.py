"""End-to-end assessment pipeline: plan, execute, reflect, answer."""

from __future__ import annotations

import logging
from typing import Optional, Sequence, Union

import numpy as np

from .calibration import FORM_STANDARD
from .config import DEFAULT_QUERY, EngineConfig
from .context import QueryContext
from .executor import ExecutionPolicy, Executor
from .gateway import GatewayError, VlmGateway, build_gateway
from .images import ImageRef
from .model import AnswerKind, FinalAnswer, GLOBAL_SCOPE, Plan, QueryType
from .planner import Lexicon, load_default_lexicon, make_plan
from .summarizer import (
    MODE_NORMALIZED,
    generate_answer,
    reflect_loop,
)
from .tools.registry import Registry, load_default_registry, load_registry

log = logging.getLogger(__name__)

ImageLike = Union[ImageRef, str, np.ndarray]


def _as_image(value: ImageLike) -> ImageRef:
    if isinstance(value, ImageRef):
        return value
    if isinstance(value, np.ndarray):
        return ImageRef.from_array(value)
    return ImageRef.from_path(str(value))


class AssessmentEngine:
    """One configured pipeline; assess() may be called repeatedly.

    ``last_state`` and ``last_plan_detail`` always describe the most recent
    assess() call; they exist for tests and debugging, not for concurrent
    callers.
    """

    def __init__(
        self,
        gateway: Optional[VlmGateway] = None,
        registry: Optional[Registry] = None,
        policy: Optional[ExecutionPolicy] = None,
        lexicon: Optional[Lexicon] = None,
        fusion_mode: str = MODE_NORMALIZED,
        eta: float = 1.0,
        logistic_form: str = FORM_STANDARD,
        max_reflect_rounds: int = 2,
        adapter_target=None,
        replay_strict: bool = False,
        default_query: str = DEFAULT_QUERY,
    ):
        self.gateway = gateway
        self.registry = registry if registry is not None else load_default_registry()
        self.lexicon = lexicon if lexicon is not None else load_default_lexicon()
        self.fusion_mode = fusion_mode
        self.eta = eta
        self.max_reflect_rounds = max_reflect_rounds
        self.replay_strict = replay_strict
        self.default_query = default_query
        self.executor = Executor(
            gateway,
            self.registry,
            policy or ExecutionPolicy(),
            adapter_target=adapter_target,
            logistic_form=logistic_form,
            replay_strict=replay_strict,
        )
        self.last_state = None
        self.last_plan_detail: Optional[dict] = None

    @classmethod
    def from_config(cls, config: EngineConfig) -> "AssessmentEngine":
        config.validate()
        gateway = None
        if config.backend != "none":
            gateway = build_gateway(
                config.backend,
                endpoint=config.endpoint,
                model=config.model,
                api_key=config.api_key,
                cassette_path=config.cassette_path,
            )
        registry = (
            load_registry(config.registry_path) if config.registry_path else load_default_registry()
        )
        policy = ExecutionPolicy(
            max_parallel_tools=config.max_parallel_tools,
            per_tool_timeout_ms=config.per_tool_timeout_ms,
            on_tool_failure=config.on_tool_failure,
        )
        return cls(
            gateway=gateway,
            registry=registry,
            policy=policy,
            fusion_mode=config.fusion_mode,
            eta=config.eta,
            logistic_form=config.logistic_form,
            max_reflect_rounds=config.max_reflect_rounds,
            adapter_target=config.adapter_target,
            replay_strict=config.replay_strict,
            default_query=config.default_query,
        )

    def _resolve_kind(self, plan: Plan, options) -> AnswerKind:
        if options:
            return AnswerKind.CHOICE
        if plan.query_type == QueryType.OTHER:
            return AnswerKind.FREE_TEXT
        if plan.query_scope == GLOBAL_SCOPE and (
            plan.flags.tool_execute or plan.required_tools
        ):
            return AnswerKind.SCORE
        return AnswerKind.FREE_TEXT

    def assess(
        self,
        query_text: Optional[str],
        distorted: ImageLike,
        reference: Optional[ImageLike] = None,
        options: Optional[Sequence[str]] = None,
        answer_kind: Optional[AnswerKind] = None,
        tool_constraints: Optional[Sequence[str]] = None,
    ) -> FinalAnswer:
        ctx = QueryContext(
            query_text=query_text or self.default_query,
            distorted=_as_image(distorted),
            reference=_as_image(reference) if reference is not None else None,
            tool_constraints=tuple(tool_constraints) if tool_constraints else None,
        )
        plan, plan_detail = make_plan(
            ctx,
            self.gateway,
            registry=self.registry,
            lexicon=self.lexicon,
            replay_strict=self.replay_strict,
        )
        state = self.executor.run(ctx, plan)
        kind = answer_kind or self._resolve_kind(plan, options)

        replan = None
        if self.gateway is not None:
            def replan(note: str) -> Optional[Plan]:
                try:
                    revised, _ = make_plan(
                        ctx,
                        self.gateway,
                        registry=self.registry,
                        lexicon=self.lexicon,
                        extra_note=note,
                        replay_strict=False,
                    )
                    return revised
                except GatewayError as exc:
                    log.warning("replanning failed: %s", exc)
                    return None

        state, sufficiency, rounds = reflect_loop(
            ctx,
            state,
            self.executor,
            kind,
            replan=replan,
            max_rounds=self.max_reflect_rounds,
            logprobs_available=self.gateway is not None,
        )
        answer = generate_answer(
            ctx,
            state,
            kind,
            gateway=self.gateway,
            options=options,
            fusion_mode=self.fusion_mode,
            eta=self.eta,
            sufficiency=sufficiency,
            reflect_rounds=rounds,
        )
        self.last_state = state
        self.last_plan_detail = plan_detail
        return answer

    def close(self) -> None:
        self.executor.close()
