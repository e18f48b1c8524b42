"""Correlation math, manifest loading, batch scoring, and the MCQ harness."""

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iqa_agent.config import DEFAULT_QUERY
from iqa_agent.engine import AssessmentEngine
from iqa_agent.evaluation import (
    MCQ_TRACKS,
    AllRowsFailedError,
    DegenerateInputError,
    LoadError,
    McqItem,
    MosRow,
    load_manifest,
    load_mcq,
    mean_ranks,
    plcc,
    run_mcq,
    run_scoring,
    srcc,
    write_mcq_report,
    write_scoring_report,
)
from iqa_agent.images import ImageRef

from tests.fixtures.scenarios import (
    MCQ_EXPECTED_ACCURACY,
    MCQ_EXPECTED_OVERALL,
    replay_mcq_engine,
    replay_scoring_engine,
)
from tests.helpers import seeded_rgb

# Hand-derived: ranks of [1,2,2,3] are [1, 2.5, 2.5, 4]; against [1,2,3,4]
# the rank correlation is 4.5 / sqrt(4.5 * 5.0) = 3 / sqrt(10).
TIE_SRCC = 3.0 / math.sqrt(10.0)

# Frozen from the first recording of the ten-row scoring fixture. The two
# pipelines must stay distinct: identical values would mean the uniform
# average is silently reusing the weighted score.
HVS_PLCC = 0.9997333147201289
UNIFORM_PLCC = 0.9984297212173598


def level_mean_for_target(target: float) -> float:
    """Closed-form expected uniform average for the scoring fixture.

    The fixture's scripted backend emits logprob -(c - target)^2 for level c,
    so the softmax distribution is exp(-(c-t)^2) normalized over c in 1..5.
    """
    weights = [math.exp(-((c - target) ** 2)) for c in range(1, 6)]
    z = sum(weights)
    return sum(c * w for c, w in zip(range(1, 6), weights)) / z


class TestMeanRanks:
    def test_tie_fixture(self):
        assert mean_ranks([1.0, 2.0, 2.0, 3.0]) == [1.0, 2.5, 2.5, 4.0]

    def test_unique_values(self):
        assert mean_ranks([3.0, 1.0, 2.0]) == [3.0, 1.0, 2.0]

    def test_all_equal(self):
        assert mean_ranks([5.0, 5.0, 5.0]) == [2.0, 2.0, 2.0]

    def test_descending_input(self):
        assert mean_ranks([4.0, 3.0, 2.0, 1.0]) == [4.0, 3.0, 2.0, 1.0]

    def test_three_way_tie_at_the_top(self):
        assert mean_ranks([1.0, 7.0, 7.0, 7.0]) == [1.0, 3.0, 3.0, 3.0]

    @settings(max_examples=150, deadline=None)
    @given(
        st.lists(
            st.floats(min_value=-1e6, max_value=1e6, allow_nan=False),
            min_size=1,
            max_size=40,
        )
    )
    def test_ranks_always_sum_to_triangular_number(self, values):
        ranks = mean_ranks(values)
        n = len(values)
        assert sum(ranks) == pytest.approx(n * (n + 1) / 2.0, abs=1e-9)
        assert all(1.0 <= r <= n for r in ranks)


class TestCorrelationMath:
    def test_monotone_pair_gives_one(self):
        x = [1.0, 2.0, 3.0, 4.0, 5.0]
        assert srcc(x, [math.exp(v) for v in x]) == 1.0

    def test_antitone_pair_gives_minus_one(self):
        assert srcc([1.0, 2.0, 3.0, 4.0, 5.0], [10.0, 8.0, 5.0, 2.0, 1.0]) == -1.0

    def test_tie_fixture_matches_hand_oracle(self):
        value = srcc([1.0, 2.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0])
        assert value == pytest.approx(TIE_SRCC, abs=1e-12)
        assert value == pytest.approx(0.9486832980505138, abs=1e-12)

    def test_plcc_exact_on_affine_relation(self):
        assert plcc([1.0, 2.0, 3.0], [2.0, 4.0, 6.0]) == 1.0
        assert plcc([1.0, 2.0, 3.0], [-2.0, -4.0, -6.0]) == -1.0

    def test_plcc_matches_numpy_on_noisy_data(self):
        rng = np.random.default_rng(51)
        x = rng.normal(size=30)
        y = 0.7 * x + rng.normal(scale=0.4, size=30)
        expected = float(np.corrcoef(x, y)[0, 1])
        assert plcc(x.tolist(), y.tolist()) == pytest.approx(expected, abs=1e-12)

    def test_srcc_nonlinear_monotone_is_still_one_but_plcc_is_not(self):
        x = [0.5, 1.0, 2.0, 3.5, 6.0]
        y = [math.exp(v) for v in x]
        assert srcc(x, y) == 1.0
        assert plcc(x, y) < 1.0

    def test_srcc_invariant_under_strictly_increasing_transforms(self):
        transforms = [
            lambda v: 3.0 * v - 2.0,
            lambda v: v ** 3,
            lambda v: math.exp(v),
            lambda v: math.atan(v),
        ]
        rng = np.random.default_rng(8675309)
        checked = 0
        for _ in range(20):
            x = rng.normal(size=12).tolist()
            y = rng.normal(size=12).tolist()
            base = srcc(x, y)
            for fn in transforms:
                assert srcc([fn(v) for v in x], y) == base
                assert srcc(x, [fn(v) for v in y]) == base
            checked += 1
        assert checked == 20

    def test_strictly_decreasing_transform_negates_srcc(self):
        rng = np.random.default_rng(99)
        x = rng.normal(size=15).tolist()
        y = rng.normal(size=15).tolist()
        assert srcc([-v for v in x], y) == -srcc(x, y)

    @pytest.mark.parametrize("fn", [srcc, plcc])
    def test_constant_input_rejected(self, fn):
        with pytest.raises(DegenerateInputError):
            fn([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateInputError):
            fn([1.0, 2.0, 3.0], [4.0, 4.0, 4.0])

    @pytest.mark.parametrize("fn", [srcc, plcc])
    def test_short_input_rejected(self, fn):
        with pytest.raises(DegenerateInputError):
            fn([1.0, 2.0], [2.0, 1.0])

    @pytest.mark.parametrize("fn", [srcc, plcc])
    def test_length_mismatch_rejected(self, fn):
        with pytest.raises(DegenerateInputError):
            fn([1.0, 2.0, 3.0], [1.0, 2.0])

    @pytest.mark.parametrize("bad", [math.nan, math.inf, -math.inf])
    def test_non_finite_rejected(self, bad):
        with pytest.raises(DegenerateInputError):
            srcc([1.0, bad, 3.0], [1.0, 2.0, 3.0])
        with pytest.raises(DegenerateInputError):
            plcc([1.0, 2.0, 3.0], [1.0, 2.0, bad])


class TestManifestLoading:
    def test_csv_with_optional_columns(self, tmp_path):
        path = tmp_path / "rows.csv"
        path.write_text(
            "image_path,mos,reference_path,tag\n"
            "a.png,3.5,ref.png,val\n"
            "b.png,1.0,,\n",
            encoding="utf-8",
        )
        rows = load_manifest(str(path))
        assert rows == [
            MosRow(image_path="a.png", mos=3.5, reference_path="ref.png", tag="val"),
            MosRow(image_path="b.png", mos=1.0, reference_path=None, tag=None),
        ]

    def test_csv_without_image_path_column(self, tmp_path):
        path = tmp_path / "rows.csv"
        path.write_text("file,mos\na.png,3\n", encoding="utf-8")
        with pytest.raises(LoadError, match="image_path column"):
            load_manifest(str(path))

    def test_jsonl_by_extension(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text(
            '{"image_path": "a.png", "mos": 4.2, "split": "test"}\n'
            "\n"
            '{"image_path": "b.png", "mos": 2, "reference_path": "r.png"}\n',
            encoding="utf-8",
        )
        rows = load_manifest(str(path))
        assert rows[0].tag == "test"
        assert rows[0].mos == 4.2
        assert rows[1].reference_path == "r.png"

    def test_jsonl_detected_by_leading_brace(self, tmp_path):
        path = tmp_path / "rows.txt"
        path.write_text('{"image_path": "a.png", "mos": 1}\n' * 3, encoding="utf-8")
        assert len(load_manifest(str(path))) == 3

    def test_jsonl_bad_line_reports_line_number(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text(
            '{"image_path": "a.png", "mos": 1}\n{not json\n', encoding="utf-8"
        )
        with pytest.raises(LoadError, match=r"rows\.jsonl:2"):
            load_manifest(str(path))

    def test_jsonl_non_object_line(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text('{"image_path": "a.png", "mos": 1}\n[1, 2]\n', encoding="utf-8")
        with pytest.raises(LoadError, match="must hold an object"):
            load_manifest(str(path))

    def test_missing_mos(self, tmp_path):
        path = tmp_path / "rows.csv"
        path.write_text("image_path,mos\na.png,\n", encoding="utf-8")
        with pytest.raises(LoadError, match="non-numeric mos"):
            load_manifest(str(path))

    def test_non_numeric_mos(self, tmp_path):
        path = tmp_path / "rows.csv"
        path.write_text("image_path,mos\na.png,great\n", encoding="utf-8")
        with pytest.raises(LoadError, match="non-numeric mos"):
            load_manifest(str(path))

    def test_non_finite_mos(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text('{"image_path": "a.png", "mos": NaN}\n', encoding="utf-8")
        with pytest.raises(LoadError, match="finite"):
            load_manifest(str(path))

    def test_missing_image_path_value(self, tmp_path):
        path = tmp_path / "rows.jsonl"
        path.write_text('{"image_path": "", "mos": 3}\n', encoding="utf-8")
        with pytest.raises(LoadError, match="missing image_path"):
            load_manifest(str(path))

    def test_empty_file(self, tmp_path):
        path = tmp_path / "rows.csv"
        path.write_text("   \n", encoding="utf-8")
        with pytest.raises(LoadError, match="empty manifest"):
            load_manifest(str(path))

    def test_header_only_csv(self, tmp_path):
        path = tmp_path / "rows.csv"
        path.write_text("image_path,mos\n", encoding="utf-8")
        with pytest.raises(LoadError, match="no rows"):
            load_manifest(str(path))


@pytest.fixture()
def scoring_engine(scoring_fixture):
    engine = replay_scoring_engine(scoring_fixture)
    yield engine
    engine.close()


class TestScoringRun:
    def test_report_shape_and_counts(self, scoring_fixture, scoring_engine):
        rows = load_manifest(str(scoring_fixture["manifest"]))
        report = run_scoring(rows, scoring_engine)
        assert set(report) == {
            "query",
            "counts",
            "correlations",
            "correlations_imputed",
            "impute_value",
            "rows",
        }
        assert report["query"] == DEFAULT_QUERY
        assert report["counts"] == {"total": 10, "ok": 10, "failed": 0}
        assert [r["image_path"] for r in report["rows"]] == [r.image_path for r in rows]
        assert all(r["status"] == "ok" for r in report["rows"])
        assert all(r["state_digest"] for r in report["rows"])

    def test_both_ablation_blocks_present_and_distinct(
        self, scoring_fixture, scoring_engine
    ):
        rows = load_manifest(str(scoring_fixture["manifest"]))
        report = run_scoring(rows, scoring_engine)
        blocks = report["correlations"]
        assert set(blocks) == {"hvs_weighted", "uniform_average"}
        for block in blocks.values():
            assert block["n"] == 10
            assert "srcc" in block and "plcc" in block
        assert blocks["hvs_weighted"]["srcc"] == pytest.approx(1.0, abs=1e-12)
        assert blocks["uniform_average"]["srcc"] == pytest.approx(1.0, abs=1e-12)
        assert blocks["hvs_weighted"]["plcc"] == pytest.approx(HVS_PLCC, abs=1e-12)
        assert blocks["uniform_average"]["plcc"] == pytest.approx(
            UNIFORM_PLCC, abs=1e-12
        )
        assert blocks["hvs_weighted"]["plcc"] != blocks["uniform_average"]["plcc"]

    def test_uniform_averages_match_closed_form(self, scoring_fixture, scoring_engine):
        rows = load_manifest(str(scoring_fixture["manifest"]))
        report = run_scoring(rows, scoring_engine)
        for entry, mos in zip(report["rows"], scoring_fixture["mos"]):
            assert entry["q_uniform"] == pytest.approx(
                level_mean_for_target(mos), abs=1e-9
            )
        expected_plcc = float(
            np.corrcoef(
                [level_mean_for_target(m) for m in scoring_fixture["mos"]],
                scoring_fixture["mos"],
            )[0, 1]
        )
        assert report["correlations"]["uniform_average"]["plcc"] == pytest.approx(
            expected_plcc, abs=1e-9
        )

    def test_scores_rise_with_mos(self, scoring_fixture, scoring_engine):
        rows = load_manifest(str(scoring_fixture["manifest"]))
        report = run_scoring(rows, scoring_engine)
        scores = [r["score"] for r in report["rows"]]
        assert all(b > a for a, b in zip(scores, scores[1:]))
        assert all(1.0 <= s <= 5.0 for s in scores)

    def test_replay_is_deterministic(self, scoring_fixture):
        dumps = []
        rows = load_manifest(str(scoring_fixture["manifest"]))
        for _ in range(2):
            engine = replay_scoring_engine(scoring_fixture)
            try:
                report = run_scoring(rows, engine)
            finally:
                engine.close()
            dumps.append(json.dumps(report, sort_keys=True))
        assert dumps[0] == dumps[1]

    def test_failed_row_is_imputed_not_fatal(self, scoring_fixture, scoring_engine):
        rows = load_manifest(str(scoring_fixture["manifest"]))
        rows.append(MosRow(image_path="/nonexistent/broken.png", mos=2.0))
        report = run_scoring(rows, scoring_engine, impute_value=2.5)
        assert report["counts"] == {"total": 11, "ok": 10, "failed": 1}
        assert report["impute_value"] == 2.5
        assert report["correlations"]["hvs_weighted"]["n"] == 10
        assert report["correlations_imputed"]["hvs_weighted"]["n"] == 11
        assert report["correlations_imputed"]["uniform_average"]["n"] == 11
        failed = report["rows"][-1]
        assert failed["status"] == "failed"
        assert failed["reason"]
        assert failed["score"] is None

    def test_all_rows_failing_raises(self):
        rows = [
            MosRow(image_path=f"/nonexistent/{i}.png", mos=float(i + 1))
            for i in range(3)
        ]
        engine = AssessmentEngine(gateway=None)
        try:
            with pytest.raises(AllRowsFailedError):
                run_scoring(rows, engine)
        finally:
            engine.close()


class TestScoringReportFiles:
    def test_json_and_csv_outputs(self, scoring_fixture, scoring_engine, tmp_path):
        rows = load_manifest(str(scoring_fixture["manifest"]))
        report = run_scoring(rows, scoring_engine)
        json_path, csv_path = write_scoring_report(
            report, str(tmp_path / "out" / "run1")
        )
        assert json_path.endswith("run1.json")
        assert csv_path.endswith("run1.csv")

        text = open(json_path, encoding="utf-8").read()
        assert text.endswith("\n")
        assert json.loads(text) == json.loads(json.dumps(report))

        lines = open(csv_path, encoding="utf-8").read().splitlines()
        assert lines[0] == "image_path,mos,status,score,q_uniform,reason"
        assert len(lines) == 1 + len(rows)
        assert lines[1].startswith(report["rows"][0]["image_path"])


class TestMcqLoading:
    def write_items(self, tmp_path, payload):
        path = tmp_path / "items.json"
        path.write_text(json.dumps(payload), encoding="utf-8")
        return str(path)

    def valid_item(self, **overrides):
        item = {
            "id": "q1",
            "track": "planner",
            "question": "Which scope?",
            "options": ["A. Global", "B. Region"],
            "answer": "A",
            "image_path": "img.png",
        }
        item.update(overrides)
        return item

    def test_fixture_file_loads(self, mcq_fixture):
        items = load_mcq(str(mcq_fixture["items"]))
        assert len(items) == 20
        per_track = {t: 0 for t in MCQ_TRACKS}
        for item in items:
            per_track[item.track] += 1
            assert item.answer in "ABCD"
            assert 2 <= len(item.options) <= 4
        assert all(count == 5 for count in per_track.values())

    def test_not_an_array(self, tmp_path):
        with pytest.raises(LoadError, match="non-empty JSON array"):
            load_mcq(self.write_items(tmp_path, {"items": []}))

    def test_empty_array(self, tmp_path):
        with pytest.raises(LoadError, match="non-empty JSON array"):
            load_mcq(self.write_items(tmp_path, []))

    def test_not_json(self, tmp_path):
        path = tmp_path / "items.json"
        path.write_text("not json at all", encoding="utf-8")
        with pytest.raises(LoadError, match="not valid JSON"):
            load_mcq(str(path))

    def test_item_not_an_object(self, tmp_path):
        with pytest.raises(LoadError, match=r"\[1\]: item must be an object"):
            load_mcq(self.write_items(tmp_path, [self.valid_item(), 7]))

    def test_missing_field(self, tmp_path):
        item = self.valid_item()
        del item["answer"]
        with pytest.raises(LoadError, match="missing field"):
            load_mcq(self.write_items(tmp_path, [item]))

    def test_unknown_track(self, tmp_path):
        item = self.valid_item(track="referee")
        with pytest.raises(LoadError, match="track must be one of"):
            load_mcq(self.write_items(tmp_path, [item]))

    @pytest.mark.parametrize(
        "options",
        [
            ["A. only one"],
            ["A. a", "B. b", "C. c", "D. d", "E. e"],
            "A. not a list",
        ],
    )
    def test_option_count_bounds(self, tmp_path, options):
        item = self.valid_item(options=options)
        with pytest.raises(LoadError, match="2 to 4"):
            load_mcq(self.write_items(tmp_path, [item]))

    def test_duplicate_option_letters(self, tmp_path):
        item = self.valid_item(options=["A. first", "A. second"])
        with pytest.raises(LoadError, match="duplicate option letters"):
            load_mcq(self.write_items(tmp_path, [item]))

    def test_option_without_letter_label(self, tmp_path):
        item = self.valid_item(options=["1. numbered", "B. fine"])
        with pytest.raises(LoadError, match="letter label"):
            load_mcq(self.write_items(tmp_path, [item]))

    def test_answer_not_among_letters(self, tmp_path):
        item = self.valid_item(answer="C")
        with pytest.raises(LoadError, match="not among option letters"):
            load_mcq(self.write_items(tmp_path, [item]))

    def test_context_must_be_object(self, tmp_path):
        item = self.valid_item(context=["not", "a", "dict"])
        with pytest.raises(LoadError, match="context must be an object"):
            load_mcq(self.write_items(tmp_path, [item]))

    def test_defaults_and_normalization(self, tmp_path):
        item = self.valid_item(answer=" b ", options=["a. low", "b. high"])
        del item["id"]
        loaded = load_mcq(self.write_items(tmp_path, [item]))
        assert loaded[0].id == "0"
        assert loaded[0].answer == "B"
        assert loaded[0].reference_path is None
        assert loaded[0].context is None


@pytest.fixture()
def mcq_engine(mcq_fixture):
    engine = replay_mcq_engine(mcq_fixture)
    yield engine
    engine.close()


class TestMcqRun:
    def test_per_track_accuracies_are_pinned(self, mcq_fixture, mcq_engine):
        items = load_mcq(str(mcq_fixture["items"]))
        report = run_mcq(items, mcq_engine)
        accuracies = {
            track: block["accuracy"] for track, block in report["per_track"].items()
        }
        assert accuracies == MCQ_EXPECTED_ACCURACY
        assert all(block["total"] == 5 for block in report["per_track"].values())
        assert report["overall"] == {
            "total": 20,
            "correct": 16,
            "accuracy": MCQ_EXPECTED_OVERALL,
        }

    def test_items_keep_manifest_order_and_record_predictions(
        self, mcq_fixture, mcq_engine
    ):
        items = load_mcq(str(mcq_fixture["items"]))
        report = run_mcq(items, mcq_engine)
        assert [r["id"] for r in report["items"]] == [i.id for i in items]
        for item, result in zip(items, report["items"]):
            assert result["expected"] == item.answer
            assert result["predicted"] in "ABCD"
            assert result["correct"] == (result["predicted"] == item.answer)

    def test_replay_is_stable_across_runs(self, mcq_fixture):
        items = load_mcq(str(mcq_fixture["items"]))
        reports = []
        for _ in range(2):
            engine = replay_mcq_engine(mcq_fixture)
            try:
                reports.append(run_mcq(items, engine))
            finally:
                engine.close()
        assert json.dumps(reports[0], sort_keys=True) == json.dumps(
            reports[1], sort_keys=True
        )

    def test_missing_gateway_marks_item_failed(self, tmp_path):
        image = ImageRef.from_array(seeded_rgb(17, 32, 32))
        image_path = tmp_path / "probe.png"
        image_path.write_bytes(image.png_bytes())
        item = McqItem(
            id="q0",
            track="planner",
            question="Which scope fits?",
            options=("A. Global", "B. Region"),
            answer="A",
            image_path=str(image_path),
        )
        engine = AssessmentEngine(gateway=None)
        try:
            report = run_mcq([item], engine)
        finally:
            engine.close()
        result = report["items"][0]
        assert result["correct"] is False
        assert result["predicted"] is None
        assert result["error"] == "no gateway configured"
        assert report["per_track"]["planner"]["accuracy"] == 0.0

    def test_unreadable_image_marks_item_failed(self, mcq_engine):
        item = McqItem(
            id="q0",
            track="planner",
            question="Which scope fits?",
            options=("A. Global", "B. Region"),
            answer="A",
            image_path="/nonexistent/missing.png",
        )
        report = run_mcq([item], mcq_engine)
        result = report["items"][0]
        assert result["correct"] is False
        assert result["error"]


class TestMcqReportFiles:
    def test_json_and_csv_outputs(self, mcq_fixture, mcq_engine, tmp_path):
        items = load_mcq(str(mcq_fixture["items"]))
        report = run_mcq(items, mcq_engine)
        json_path, csv_path = write_mcq_report(report, str(tmp_path / "mcq" / "bench"))

        loaded = json.loads(open(json_path, encoding="utf-8").read())
        assert loaded["overall"]["correct"] == 16

        lines = open(csv_path, encoding="utf-8").read().splitlines()
        assert lines[0] == "id,track,expected,predicted,correct,error"
        assert len(lines) == 21
        assert lines[1].split(",")[0] == report["items"][0]["id"]
