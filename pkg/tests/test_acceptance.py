"""Shipping gate: one test per acceptance criterion.

Each test re-checks its criterion end to end, inside a wall-clock budget,
and reports a single ``[ACCEPTANCE] <name>: PASS`` or ``FAIL`` line on the
terminal. The file is self-sufficient: running it alone must give the
full verdict.
"""

import contextlib
import itertools
import json
import math
import time

import numpy as np
import pytest

from iqa_agent.calibration import (
    FORM_STANDARD,
    LogisticParams,
    default_params,
    fit_logistic,
    logistic_map,
    logistic_map_full,
)
from iqa_agent.evaluation import run_scoring, load_manifest, srcc
from iqa_agent.model import (
    QUALITY_LEVELS,
    DistortionCategory,
    DistortionSource,
    PlanFlags,
    ReferenceMode,
    validate_plan,
)
from iqa_agent.parsing import NoChoiceFoundError, parse_choice
from iqa_agent.planner import PlannerRuleInputs, apply_rule_table
from iqa_agent.summarizer import (
    MODE_LITERAL,
    MODE_NORMALIZED,
    FusionInputs,
    fuse_scores,
)
from iqa_agent.tools.adapter_client import (
    AdapterProtocolError,
    AdapterTimeoutError,
    StdioAdapterClient,
)
from iqa_agent.tools.kernels import PSNR_CAP_DB, gmsd, ms_ssim, psnr, ssim
from iqa_agent.tools.registry import select_tool_deterministic

from tests.fixtures.published_params import PUBLISHED_BETAS
from tests.fixtures.scenarios import (
    MCQ_EXPECTED_ACCURACY,
    MCQ_EXPECTED_OVERALL,
    echo_adapter_argv,
    replay_mcq_engine,
    replay_scenario,
    replay_scoring_engine,
)
from tests.helpers import degraded, seeded_gray, seeded_pair, seeded_rgb
from tests.oracles import fusion_bruteforce as fusion_oracle
from tests.oracles import image_metrics as metric_oracle
from tests.test_adapter import score_request
from tests.test_calibration import noise_free_pairs, reference_curve
from tests.test_evaluation import TIE_SRCC
from tests.test_planner import EXPECTED_GATES, draft_for
from iqa_agent.evaluation import load_mcq, run_mcq


@contextlib.contextmanager
def criterion(request, name, budget_s):
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def emit(line):
        if reporter is not None:
            reporter.write_line(line)
        else:
            print(line)

    started = time.perf_counter()
    try:
        yield
        elapsed = time.perf_counter() - started
        if elapsed >= budget_s:
            raise AssertionError(
                f"{name} took {elapsed:.2f}s, budget is {budget_s:g}s"
            )
    except BaseException:
        emit(f"[ACCEPTANCE] {name}: FAIL")
        raise
    emit(f"[ACCEPTANCE] {name}: PASS")


def by_level(int_logprobs):
    return {level: int_logprobs[level.value] for level in QUALITY_LEVELS}


def test_planner_rule_table(request):
    with criterion(request, "planner_rule_table", 1.0):
        checked = 0
        for bits in itertools.product([False, True], repeat=5):
            is_iqa, dist, region, tool, has_ref = bits
            expected = EXPECTED_GATES[(is_iqa, dist, region, tool)]
            wrong = PlanFlags(*(not f for f in expected))
            plan = apply_rule_table(
                draft_for(is_iqa, dist, region, tool, wrong),
                PlannerRuleInputs(
                    is_iqa=is_iqa,
                    mentions_distortions=dist,
                    mentions_region=region,
                    mentions_tool=tool,
                    has_reference=has_ref,
                ),
            )
            got = (
                plan.flags.distortion_detection,
                plan.flags.distortion_analysis,
                plan.flags.tool_selection,
                plan.flags.tool_execute,
            )
            assert got == expected, f"gates for {bits}"
            assert plan.reference_mode == (
                ReferenceMode.FULL_REFERENCE if has_ref else ReferenceMode.NO_REFERENCE
            )
            assert plan.distortion_source == (
                DistortionSource.EXPLICIT if dist else DistortionSource.INFERRED
            )
            assert validate_plan(plan) == []
            checked += 1
        assert checked == 32


def test_fusion_arithmetic(request):
    with criterion(request, "fusion_arithmetic", 5.0):
        rng = np.random.default_rng(20260816)
        vectors = [rng.normal(-2.0, 1.5, size=5) for _ in range(100)]
        targets = [1.0 + 0.5 * k for k in range(9)]
        etas = (0.5, 1.0, 2.0)
        checked = 0
        for target, eta, vector in itertools.product(targets, etas, vectors):
            scores = (
                [target]
                if checked % 2 == 0
                else [target - 0.2, target + 0.2]
            )
            int_logprobs = {c: float(vector[c - 1]) for c in range(1, 6)}
            inputs = FusionInputs(
                tool_scores=tuple(scores),
                level_logprobs=by_level(int_logprobs),
                eta=eta,
            )
            literal, diag = fuse_scores(inputs, MODE_LITERAL)
            normalized, _ = fuse_scores(inputs, MODE_NORMALIZED)
            want_literal, want_normalized, _ = fusion_oracle.fuse(
                scores, int_logprobs, eta
            )
            assert literal == pytest.approx(want_literal, abs=1e-9)
            assert normalized == pytest.approx(want_normalized, abs=1e-9)
            assert sum(diag["alpha"].values()) == pytest.approx(1.0, abs=1e-12)
            assert sum(diag["p"].values()) == pytest.approx(1.0, abs=1e-12)
            assert 1.0 <= normalized <= 5.0
            checked += 1
        assert checked == len(targets) * len(etas) * 100


def test_fusion_symmetry_fixture(request):
    with criterion(request, "fusion_symmetry_fixture", 5.0):
        uniform = {c: math.log(0.2) for c in range(1, 6)}
        inputs = FusionInputs(
            tool_scores=(3.0,), level_logprobs=by_level(uniform), eta=1.0
        )
        normalized, diag = fuse_scores(inputs, MODE_NORMALIZED)
        literal, _ = fuse_scores(inputs, MODE_LITERAL)

        assert normalized == pytest.approx(3.0, abs=1e-9)
        assert literal == pytest.approx(0.6, abs=1e-9)
        want_literal, want_normalized, _ = fusion_oracle.fuse([3.0], uniform, 1.0)
        assert normalized == pytest.approx(want_normalized, abs=1e-12)
        assert literal == pytest.approx(want_literal, abs=1e-12)
        # The level weights are symmetric around 3, so their weighted mean
        # must sit exactly on the center.
        alpha_mean = sum(int(c) * a for c, a in diag["alpha"].items())
        assert alpha_mean == pytest.approx(3.0, abs=1e-12)


def test_calibration_published_table(request, registry):
    with criterion(request, "calibration_published_table", 10.0):
        assert len(PUBLISHED_BETAS) == 24
        for name, beta in PUBLISHED_BETAS.items():
            assert registry.get(name).beta == beta, name
        assert {d.name for d in registry.with_beta()} == set(PUBLISHED_BETAS)

        for name in ("SSIM", "DISTS", "QAlign"):
            params = default_params(name, registry)
            for raw in (-1.0, 0.0, 0.5, 1.0, 30.0):
                detail = logistic_map_full(raw, params)
                assert detail.pre_clamp == pytest.approx(
                    reference_curve(raw, params.beta), abs=1e-9
                )

        affine = LogisticParams(beta=(0.0, 55.5, -2.0, 0.75, 2.5), clamp=False)
        for x in (-4.0, -1.0, 0.0, 0.5, 3.25):
            assert logistic_map(x, affine) == 0.75 * x + 2.5

        x, y, beta_true = noise_free_pairs(FORM_STANDARD)
        params, report = fit_logistic(x, y, clamp=False)
        fitted = np.array([logistic_map(float(v), params) for v in x])
        assert float(np.max(np.abs(fitted - y))) < 1e-6
        assert report.converged

        rng = np.random.default_rng(5)
        _, noisy_report = fit_logistic(x, y + rng.normal(0.0, 0.05, size=y.shape))
        trace = noisy_report.rss_trace
        assert all(b <= a + 1e-15 for a, b in zip(trace, trace[1:]))
        assert noisy_report.rss == trace[-1]


def test_native_kernels(request):
    with criterion(request, "native_kernels", 30.0):
        image = seeded_rgb(11, 64, 64)
        assert ssim(image, image) == 1.0
        assert ms_ssim(image, image) == 1.0
        assert gmsd(image, image) == 0.0
        assert psnr(image, image) == PSNR_CAP_DB
        assert psnr(image, image, cap_db=77.0) == 77.0

        for i in range(50):
            a, b = seeded_pair(1000 + i, 64, 64)
            for kernel in (ssim, ms_ssim, gmsd, psnr):
                assert kernel(a, b) == pytest.approx(kernel(b, a), abs=1e-12)

        black = np.zeros((32, 32), dtype=np.float64)
        white = np.full((32, 32), 255.0)
        assert ssim(black, white) == pytest.approx(
            metric_oracle.ssim_constant_pair(0.0, 255.0), abs=1e-9
        )

        base = np.clip(seeded_rgb(5, 40, 40), 0, 254).astype(np.float64)
        assert psnr(base + 1.0, base) == pytest.approx(48.1308, abs=1e-3)

        pairs = [seeded_pair(11, 256, 256), seeded_pair(21, 64, 64)]
        gray = seeded_gray(12, 64, 64)
        pairs.append((gray, degraded(gray, 1012)))
        for reference, distorted in pairs:
            assert ms_ssim(distorted, reference) == pytest.approx(
                metric_oracle.ms_ssim(reference, distorted), abs=1e-6
            )
            assert gmsd(distorted, reference) == pytest.approx(
                metric_oracle.gmsd(reference, distorted), abs=1e-6
            )


def test_tool_selection_pins(request, registry):
    with criterion(request, "tool_selection_pins", 5.0):
        pins = [
            (DistortionCategory("Blurs", "Gaussian blur"),
             ReferenceMode.FULL_REFERENCE, "DISTS"),
            (DistortionCategory("Color distortions", "color diffusion"),
             ReferenceMode.NO_REFERENCE, "LIQE"),
            (DistortionCategory("Noise", "white noise"),
             ReferenceMode.NO_REFERENCE, "QAlign"),
            (DistortionCategory("Compression", "JPEG compression"),
             ReferenceMode.FULL_REFERENCE, "TOPIQ_FR"),
        ]
        for distortion, mode, expected in pins:
            assert select_tool_deterministic(distortion, mode, registry) == expected


def test_end_to_end_replay(request, scenarios, scenario_cassettes):
    with criterion(request, "end_to_end_replay", 10.0):
        for name, scenario in scenarios.items():
            payloads = set()
            for _ in range(5):
                answer, state, calls = replay_scenario(
                    scenario, scenario_cassettes[name]
                )
                payloads.add(answer.to_json_bytes())
            assert len(payloads) == 1, name
            if name == "non_iqa":
                assert state.scores == []
                assert state.assignments == {}
                # One call plans, at most one more phrases the reply.
                assert calls - 1 <= 1


def test_correlation_metrics(request):
    with criterion(request, "correlation_metrics", 5.0):
        x = [1.0, 2.0, 3.0, 4.0, 5.0]
        assert srcc(x, [math.exp(v) for v in x]) == 1.0
        assert srcc(x, [-v for v in x]) == -1.0
        assert srcc([1.0, 2.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0]) == pytest.approx(
            TIE_SRCC, abs=1e-12
        )

        transforms = (lambda v: 3.0 * v - 2.0, lambda v: v ** 3, math.exp)
        rng = np.random.default_rng(8675309)
        for _ in range(20):
            a = rng.normal(size=12).tolist()
            b = rng.normal(size=12).tolist()
            base = srcc(a, b)
            for fn in transforms:
                assert srcc([fn(v) for v in a], b) == base


def test_mcq_harness(request, mcq_fixture):
    with criterion(request, "mcq_harness", 10.0):
        items = load_mcq(str(mcq_fixture["items"]))
        reports = []
        for _ in range(2):
            engine = replay_mcq_engine(mcq_fixture)
            try:
                reports.append(run_mcq(items, engine))
            finally:
                engine.close()
        for report in reports:
            accuracies = {
                track: block["accuracy"]
                for track, block in report["per_track"].items()
            }
            assert accuracies == MCQ_EXPECTED_ACCURACY
            assert report["overall"]["accuracy"] == MCQ_EXPECTED_OVERALL
        assert json.dumps(reports[0], sort_keys=True) == json.dumps(
            reports[1], sort_keys=True
        )

        # Tier ordering of the option-letter parser: an embedded JSON verdict
        # beats a standalone letter, which beats matching option text.
        options = ["A. pristine", "B. grainy", "C. blurred", "D. patchy"]
        tiered = 'Looks patchy. {"final_answer": "B"} Answer: C.'
        assert parse_choice(tiered, options) == "B"
        assert parse_choice("It is patchy. Answer: C.", options) == "C"
        assert parse_choice("clearly grainy throughout", options) == "B"
        with pytest.raises(NoChoiceFoundError):
            parse_choice("no verdict here", options)


def test_adapter_conformance(request):
    with criterion(request, "adapter_conformance", 30.0):
        client = StdioAdapterClient(echo_adapter_argv(), timeout_ms=5000)
        try:
            reply = client.handshake()
            assert reply["version"] == "agentiqa-adapter/1"
            assert reply["tools"] == ["ECHO"]
            for i in range(10):
                response = client.score(score_request(f"conf-{i}"))
                assert response.status == "ok"
                assert response.request_id == f"conf-{i}"
        finally:
            client.close()

        hanging = StdioAdapterClient(echo_adapter_argv("--hang"), timeout_ms=300)
        try:
            with pytest.raises(AdapterTimeoutError):
                hanging.score(score_request())
        finally:
            hanging.close()

        garbling = StdioAdapterClient(echo_adapter_argv("--malformed"), timeout_ms=5000)
        try:
            with pytest.raises(AdapterProtocolError):
                garbling.score(score_request())
        finally:
            garbling.close()

        mangling = StdioAdapterClient(echo_adapter_argv("--wrong-id"), timeout_ms=5000)
        try:
            with pytest.raises(AdapterProtocolError):
                mangling.score(score_request("id-check"))
        finally:
            mangling.close()


def test_ablation_plumbing(request, scoring_fixture):
    with criterion(request, "ablation_plumbing", 10.0):
        rows = load_manifest(str(scoring_fixture["manifest"]))
        engine = replay_scoring_engine(scoring_fixture)
        try:
            report = run_scoring(rows, engine)
        finally:
            engine.close()
        blocks = report["correlations"]
        assert set(blocks) == {"hvs_weighted", "uniform_average"}
        for block in blocks.values():
            assert block["n"] == 10
            assert math.isfinite(block["srcc"])
            assert math.isfinite(block["plcc"])
        assert blocks["hvs_weighted"]["plcc"] != blocks["uniform_average"]["plcc"]
        assert blocks["hvs_weighted"]["srcc"] == pytest.approx(1.0, abs=1e-12)
        assert blocks["uniform_average"]["srcc"] == pytest.approx(1.0, abs=1e-12)
