"""Correlation metrics, batch scoring runs, and the MCQ benchmark harness.

SRCC is computed as the Pearson correlation of mean ranks (ties share the
average of the rank positions they span), PLCC as plain Pearson. Both
refuse constant inputs instead of returning 0: a correlation against a
constant vector is undefined, and silently reporting one hides broken
fixtures.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

from .config import DEFAULT_QUERY
from .context import QueryContext
from .executor import render_tool_catalog
from .gateway import ChatMessage, ChatRequest, GatewayError
from .images import ImageReadError, ImageRef
from .model import (
    AnalysisEntry,
    AnswerKind,
    IntermediateState,
    Plan,
    QueryType,
    ReferenceMode,
    SchemaError,
    ToolScore,
    UnknownSeverityError,
)
from .parsing import NoChoiceFoundError, parse_choice
from .prompts import DETECTION, PLANNER, TOOL_SELECTION, load_prompt, render
from .summarizer import generate_answer

log = logging.getLogger(__name__)


class DegenerateInputError(ValueError):
    """Correlation is undefined for these inputs (constant or too short)."""


class AllRowsFailedError(RuntimeError):
    """Not a single manifest row produced a score."""


class LoadError(ValueError):
    """A manifest or question file does not match its schema."""


# ---------------------------------------------------------------------------
# Correlation metrics
# ---------------------------------------------------------------------------


def _validated(pred: Sequence[float], mos: Sequence[float]) -> tuple[list, list]:
    a = [float(v) for v in pred]
    b = [float(v) for v in mos]
    if len(a) != len(b):
        raise DegenerateInputError(f"length mismatch: {len(a)} vs {len(b)}")
    if len(a) < 3:
        raise DegenerateInputError(f"need at least 3 pairs, got {len(a)}")
    if not all(math.isfinite(v) for v in a + b):
        raise DegenerateInputError("inputs must be finite")
    return a, b


def _pearson(a: Sequence[float], b: Sequence[float]) -> float:
    n = len(a)
    mean_a = sum(a) / n
    mean_b = sum(b) / n
    da = [v - mean_a for v in a]
    db = [v - mean_b for v in b]
    var_a = sum(v * v for v in da)
    var_b = sum(v * v for v in db)
    if var_a == 0.0 or var_b == 0.0:
        raise DegenerateInputError("constant input has no defined correlation")
    r = sum(x * y for x, y in zip(da, db)) / math.sqrt(var_a * var_b)
    return min(1.0, max(-1.0, r))


def mean_ranks(values: Sequence[float]) -> list[float]:
    """1-based ranks; tied values all receive the mean of their positions."""
    n = len(values)
    order = sorted(range(n), key=lambda i: values[i])
    ranks = [0.0] * n
    i = 0
    while i < n:
        j = i
        while j + 1 < n and values[order[j + 1]] == values[order[i]]:
            j += 1
        shared = (i + j) / 2.0 + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = shared
        i = j + 1
    return ranks


def plcc(pred: Sequence[float], mos: Sequence[float]) -> float:
    a, b = _validated(pred, mos)
    return _pearson(a, b)


def srcc(pred: Sequence[float], mos: Sequence[float]) -> float:
    a, b = _validated(pred, mos)
    return _pearson(mean_ranks(a), mean_ranks(b))


# ---------------------------------------------------------------------------
# Scoring manifests
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MosRow:
    image_path: str
    mos: float
    reference_path: Optional[str] = None
    tag: Optional[str] = None


def _row_from_mapping(data: dict, where: str) -> MosRow:
    image_path = data.get("image_path")
    if not image_path:
        raise LoadError(f"{where}: missing image_path")
    try:
        mos = float(data["mos"])
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"{where}: missing or non-numeric mos") from exc
    if not math.isfinite(mos):
        raise LoadError(f"{where}: mos must be finite")
    reference = data.get("reference_path") or None
    tag = data.get("tag") or data.get("split") or None
    return MosRow(image_path=str(image_path), mos=mos, reference_path=reference, tag=tag)


def load_manifest(path: str) -> list[MosRow]:
    """Rows from a CSV (header: image_path, mos, optional reference_path/tag)
    or a JSON-lines file with the same keys per object."""
    lower = path.lower()
    with open(path, "r", encoding="utf-8") as fh:
        content = fh.read()
    if not content.strip():
        raise LoadError(f"{path}: empty manifest")
    is_jsonl = lower.endswith((".jsonl", ".ndjson")) or (
        not lower.endswith(".csv") and content.lstrip()[0] == "{"
    )
    rows: list[MosRow] = []
    if is_jsonl:
        for lineno, line in enumerate(content.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise LoadError(f"{path}:{lineno}: not valid JSON: {exc}") from exc
            if not isinstance(data, dict):
                raise LoadError(f"{path}:{lineno}: each line must hold an object")
            rows.append(_row_from_mapping(data, f"{path}:{lineno}"))
    else:
        reader = csv.DictReader(content.splitlines())
        if not reader.fieldnames or "image_path" not in reader.fieldnames:
            raise LoadError(f"{path}: CSV manifest needs an image_path column")
        for lineno, record in enumerate(reader, start=2):
            rows.append(_row_from_mapping(record, f"{path}:{lineno}"))
    if not rows:
        raise LoadError(f"{path}: no rows")
    return rows


def _correlation_block(pairs: Sequence[tuple]) -> dict:
    preds = [p for p, _ in pairs]
    moses = [m for _, m in pairs]
    block: dict = {"n": len(pairs)}
    try:
        block["srcc"] = srcc(preds, moses)
        block["plcc"] = plcc(preds, moses)
    except DegenerateInputError as exc:
        block["error"] = str(exc)
    return block


def run_scoring(
    rows: Sequence[MosRow],
    engine,
    query: Optional[str] = None,
    impute_value: float = 3.0,
    workers: int = 4,
) -> dict:
    """Score every manifest row and correlate predictions against MOS.

    Two correlation blocks are reported: the fused (perceptually weighted)
    score and the uniform level average, each over the successful rows.
    A second pair of blocks re-enters failed rows at ``impute_value`` so the
    cost of failures is visible. Row order follows the manifest.
    """
    query = query or getattr(engine, "default_query", None) or DEFAULT_QUERY

    def score_row(row: MosRow) -> dict:
        try:
            answer = engine.assess(
                query,
                row.image_path,
                reference=row.reference_path,
                answer_kind=AnswerKind.SCORE,
            )
        except Exception as exc:  # a bad row must not kill the run
            log.warning("row %s failed: %s", row.image_path, exc)
            return {"status": "failed", "reason": str(exc)}
        if answer.score is None:
            return {"status": "failed", "reason": answer.reasoning}
        q_uniform = None
        diag = answer.diagnostics
        if isinstance(diag.get("p"), dict):
            try:
                q_uniform = sum(float(diag["p"][str(c)]) * c for c in range(1, 6))
            except (KeyError, TypeError, ValueError):
                q_uniform = None
        elif diag.get("q_uniform") is not None:
            q_uniform = float(diag["q_uniform"])
        return {
            "status": "ok",
            "score": float(answer.score),
            "q_uniform": q_uniform,
            "state_digest": answer.state_digest,
        }

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(rows)))) as pool:
        results = list(pool.map(score_row, rows))

    report_rows = []
    fused_pairs = []
    uniform_pairs = []
    fused_imputed = []
    uniform_imputed = []
    failed = 0
    for row, result in zip(rows, results):
        entry = {
            "image_path": row.image_path,
            "mos": row.mos,
            "status": result["status"],
            "score": result.get("score"),
            "q_uniform": result.get("q_uniform"),
        }
        if row.tag:
            entry["tag"] = row.tag
        if result["status"] == "ok":
            fused_pairs.append((result["score"], row.mos))
            fused_imputed.append((result["score"], row.mos))
            if result.get("q_uniform") is not None:
                uniform_pairs.append((result["q_uniform"], row.mos))
                uniform_imputed.append((result["q_uniform"], row.mos))
            else:
                uniform_imputed.append((impute_value, row.mos))
            entry["state_digest"] = result.get("state_digest")
        else:
            failed += 1
            entry["reason"] = result.get("reason")
            fused_imputed.append((impute_value, row.mos))
            uniform_imputed.append((impute_value, row.mos))
        report_rows.append(entry)

    if not fused_pairs:
        raise AllRowsFailedError("no manifest row produced a score")

    return {
        "query": query,
        "counts": {"total": len(rows), "ok": len(rows) - failed, "failed": failed},
        "correlations": {
            "hvs_weighted": _correlation_block(fused_pairs),
            "uniform_average": _correlation_block(uniform_pairs),
        },
        "correlations_imputed": {
            "hvs_weighted": _correlation_block(fused_imputed),
            "uniform_average": _correlation_block(uniform_imputed),
        },
        "impute_value": impute_value,
        "rows": report_rows,
    }


_SCORING_CSV_COLUMNS = ("image_path", "mos", "status", "score", "q_uniform", "reason")


def write_scoring_report(report: dict, out_prefix: str) -> tuple[str, str]:
    """Write the report as {prefix}.json and {prefix}.csv; returns both paths."""
    json_path = f"{out_prefix}.json"
    csv_path = f"{out_prefix}.csv"
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_SCORING_CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in report["rows"]:
            writer.writerow(row)
    return json_path, csv_path


# ---------------------------------------------------------------------------
# MCQ harness
# ---------------------------------------------------------------------------

MCQ_TRACKS = ("planner", "executor_distortion", "executor_tool", "summarizer")

_LETTER_INSTRUCTION = "Answer with exactly one option letter."


@dataclass(frozen=True)
class McqItem:
    id: str
    track: str
    question: str
    options: tuple
    answer: str
    image_path: str
    reference_path: Optional[str] = None
    context: Optional[dict] = None


def _option_letter(option: str) -> str:
    text = option.strip()
    if not text or not text[0].isalpha():
        raise LoadError(f"option must start with its letter label: {option!r}")
    return text[0].upper()


def load_mcq(path: str) -> list[McqItem]:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise LoadError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(data, list) or not data:
        raise LoadError(f"{path}: expected a non-empty JSON array of items")
    items = []
    for index, raw in enumerate(data):
        where = f"{path}[{index}]"
        if not isinstance(raw, dict):
            raise LoadError(f"{where}: item must be an object")
        try:
            track = raw["track"]
            question = raw["question"]
            options = raw["options"]
            answer = raw["answer"]
            image_path = raw["image_path"]
        except KeyError as exc:
            raise LoadError(f"{where}: missing field {exc}") from exc
        if track not in MCQ_TRACKS:
            raise LoadError(f"{where}: track must be one of {MCQ_TRACKS}, got {track!r}")
        if not isinstance(options, list) or not 2 <= len(options) <= 4:
            raise LoadError(f"{where}: options must be a list of 2 to 4 strings")
        letters = [_option_letter(str(o)) for o in options]
        if len(set(letters)) != len(letters):
            raise LoadError(f"{where}: duplicate option letters {letters}")
        answer_letter = str(answer).strip().upper()
        if answer_letter not in letters:
            raise LoadError(
                f"{where}: answer {answer!r} is not among option letters {letters}"
            )
        context = raw.get("context")
        if context is not None and not isinstance(context, dict):
            raise LoadError(f"{where}: context must be an object")
        items.append(
            McqItem(
                id=str(raw.get("id", index)),
                track=track,
                question=str(question),
                options=tuple(str(o) for o in options),
                answer=answer_letter,
                image_path=str(image_path),
                reference_path=raw.get("reference_path") or None,
                context=context,
            )
        )
    return items


def _state_from_context(context: dict) -> IntermediateState:
    """Rebuild a minimal evidence state from a pre-supplied excerpt."""
    state = IntermediateState(plan=Plan(query_type=QueryType.IQA))
    for raw in context.get("analyses", []):
        try:
            state.analyses.append(AnalysisEntry.from_json_dict(raw))
        except (SchemaError, UnknownSeverityError) as exc:
            log.warning("skipping context analysis entry: %s", exc)
    for raw in context.get("scores", []):
        try:
            state.scores.append(ToolScore.from_json_dict(raw))
        except SchemaError as exc:
            log.warning("skipping context score entry: %s", exc)
    return state


def _prompt_track_messages(item: McqItem, registry, images: tuple) -> list:
    if item.track == "planner":
        system = load_prompt(PLANNER)
    elif item.track == "executor_distortion":
        system = load_prompt(DETECTION)
    else:
        mode = (
            ReferenceMode.FULL_REFERENCE
            if item.reference_path
            else ReferenceMode.NO_REFERENCE
        )
        distortion_set = "{}"
        if item.context and item.context.get("distortion_set") is not None:
            distortion_set = json.dumps(item.context["distortion_set"], ensure_ascii=True)
        system = render(
            load_prompt(TOOL_SELECTION),
            distortion_set=distortion_set,
            tool_description=render_tool_catalog(registry, mode),
        )
    user = f"{item.question}\nOptions:\n" + "\n".join(item.options) + f"\n{_LETTER_INSTRUCTION}"
    return [
        ChatMessage(role="system", text=system),
        ChatMessage(role="user", text=user, images=images),
    ]


def run_mcq(items: Sequence[McqItem], engine, workers: int = 4) -> dict:
    """Answer every item through its component's prompt surface.

    Planner, distortion, and tool items send that component's system prompt
    with the question and options; summarizer items go through full answer
    generation with the item's pre-supplied evidence context. Any per-item
    failure counts as incorrect and is logged in the report.
    """

    def answer_item(item: McqItem) -> dict:
        out: dict = {
            "id": item.id,
            "track": item.track,
            "expected": item.answer,
            "predicted": None,
            "correct": False,
        }
        try:
            distorted = ImageRef.from_path(item.image_path)
            images = (distorted,)
            if item.reference_path:
                images = (distorted, ImageRef.from_path(item.reference_path))
            if item.track == "summarizer":
                ctx = QueryContext(
                    query_text=item.question,
                    distorted=distorted,
                    reference=images[1] if len(images) > 1 else None,
                )
                state = _state_from_context(item.context or {})
                answer = generate_answer(
                    ctx,
                    state,
                    AnswerKind.CHOICE,
                    gateway=engine.gateway,
                    options=list(item.options),
                )
                if answer.choice is None:
                    out["error"] = "no option letter produced"
                    return out
                out["predicted"] = answer.choice
            else:
                if engine.gateway is None:
                    out["error"] = "no gateway configured"
                    return out
                messages = _prompt_track_messages(item, engine.registry, images)
                response = engine.gateway.chat(ChatRequest(messages=tuple(messages)))
                out["predicted"] = parse_choice(response.text, list(item.options))
        except (GatewayError, NoChoiceFoundError, ImageReadError, OSError) as exc:
            log.warning("item %s failed: %s", item.id, exc)
            out["error"] = str(exc)
            return out
        out["correct"] = out["predicted"] == item.answer
        return out

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(items)))) as pool:
        results = list(pool.map(answer_item, items))

    per_track: dict = {}
    for item, result in zip(items, results):
        bucket = per_track.setdefault(item.track, {"total": 0, "correct": 0})
        bucket["total"] += 1
        bucket["correct"] += int(result["correct"])
    for bucket in per_track.values():
        bucket["accuracy"] = bucket["correct"] / bucket["total"]
    total = len(items)
    correct = sum(int(r["correct"]) for r in results)
    return {
        "items": results,
        "per_track": {k: per_track[k] for k in sorted(per_track)},
        "overall": {
            "total": total,
            "correct": correct,
            "accuracy": correct / total if total else 0.0,
        },
    }


_MCQ_CSV_COLUMNS = ("id", "track", "expected", "predicted", "correct", "error")


def write_mcq_report(report: dict, out_prefix: str) -> tuple[str, str]:
    json_path = f"{out_prefix}.json"
    csv_path = f"{out_prefix}.csv"
    os.makedirs(os.path.dirname(os.path.abspath(json_path)), exist_ok=True)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_MCQ_CSV_COLUMNS, extrasaction="ignore")
        writer.writeheader()
        for row in report["items"]:
            writer.writerow(row)
    return json_path, csv_path
