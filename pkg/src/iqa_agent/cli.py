"""Command-line front end.

Every command writes machine-parseable output to stdout and logs to
stderr. Exit codes: 0 success, 1 partial (some rows or items failed),
2 fatal. Configuration precedence: flags, then environment, then config
file, then defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys

from .calibration import (
    DegenerateDataError,
    NoConvergenceError,
    fit_logistic,
)
from .config import ConfigError, load_config
from .context import QueryEmptyError
from .engine import AssessmentEngine
from .evaluation import (
    AllRowsFailedError,
    LoadError,
    load_manifest,
    load_mcq,
    run_mcq,
    run_scoring,
    write_mcq_report,
    write_scoring_report,
)
from .gateway import GatewayError
from .images import ImageReadError
from .tools.adapter_client import AdapterError, make_adapter_client
from .tools.registry import load_default_registry, load_registry

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_FATAL = 2

log = logging.getLogger(__name__)

_CONFIG_FLAGS = (
    ("--backend", "backend", str, "gateway backend: none, remote, replay, record"),
    ("--endpoint", "endpoint", str, "remote backend URL"),
    ("--model", "model", str, "remote model name"),
    ("--api-key", "api_key", str, "remote backend credential"),
    ("--cassette", "cassette_path", str, "replay/record cassette path"),
    ("--registry", "registry_path", str, "tool registry JSON (default: bundled)"),
    ("--fusion-mode", "fusion_mode", str, "normalized or literal"),
    ("--eta", "eta", float, "fusion weighting sharpness"),
    ("--logistic-form", "logistic_form", str, "standard or as_printed"),
    ("--max-parallel-tools", "max_parallel_tools", int, "tool execution fan-out"),
    ("--per-tool-timeout-ms", "per_tool_timeout_ms", int, "per tool timeout"),
    ("--on-tool-failure", "on_tool_failure", str, "skip or abort"),
    ("--adapter-target", "adapter_target", str, "default adapter endpoint or stdio: command"),
    ("--max-reflect-rounds", "max_reflect_rounds", int, "reflection round budget"),
    ("--default-query", "default_query", str, "query used when none is given"),
    ("--output-dir", "output_dir", str, "directory for report files"),
)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    group = common.add_argument_group("engine configuration")
    for flag, dest, kind, help_text in _CONFIG_FLAGS:
        group.add_argument(flag, dest=dest, type=kind, default=None, help=help_text)
    group.add_argument(
        "--replay-strict",
        dest="replay_strict",
        action="store_const",
        const=True,
        default=None,
        help="fail on cassette misses instead of degrading",
    )
    group.add_argument("--config", dest="config_path", default=None, help="JSON config file")
    common.add_argument("-v", "--verbose", action="store_true", help="INFO logging on stderr")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(
        prog="iqa-agent",
        description="Agentic image quality assessment pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_assess = sub.add_parser("assess", parents=[common], help="assess one image")
    p_assess.add_argument("image", help="image to assess")
    p_assess.add_argument("--ref", default=None, help="reference image")
    p_assess.add_argument("--query", default=None, help="question about the image")
    p_assess.add_argument(
        "--option",
        action="append",
        default=None,
        help="answer option (repeat to pose a multiple-choice question)",
    )
    p_assess.set_defaults(func=cmd_assess)

    p_score = sub.add_parser("score", parents=[common], help="score a MOS manifest")
    p_score.add_argument("--manifest", required=True, help="CSV or JSONL manifest")
    p_score.add_argument("--out", default=None, help="report path prefix")
    p_score.add_argument("--query", default=None, help="query override")
    p_score.add_argument("--impute", type=float, default=3.0, help="score for failed rows")
    p_score.add_argument("--workers", type=int, default=4)
    p_score.set_defaults(func=cmd_score)

    p_eval = sub.add_parser("eval", parents=[common], help="run an MCQ benchmark file")
    p_eval.add_argument("--mcq", required=True, help="JSON array of MCQ items")
    p_eval.add_argument("--out", default=None, help="report path prefix")
    p_eval.add_argument("--workers", type=int, default=4)
    p_eval.set_defaults(func=cmd_eval)

    p_cal = sub.add_parser("calibrate", parents=[common], help="fit a calibration curve")
    p_cal.add_argument("--tool", required=True, help="tool name the fit is for")
    p_cal.add_argument("--pairs", required=True, help="CSV with raw,mos columns")
    p_cal.add_argument("--out", default=None, help="patch file path (default stdout)")
    p_cal.set_defaults(func=cmd_calibrate)

    p_tools = sub.add_parser("tools", parents=[common], help="inspect the tool registry")
    p_tools.add_argument("action", choices=("list", "describe", "probe"))
    p_tools.add_argument("name", nargs="?", default=None, help="tool name (describe/probe)")
    p_tools.add_argument("--target", default=None, help="adapter target override for probe")
    p_tools.set_defaults(func=cmd_tools)

    return parser


def _fatal(message: str) -> int:
    print(json.dumps({"error": message}), file=sys.stderr)
    return EXIT_FATAL


def _engine_config(args):
    flags = {dest: getattr(args, dest, None) for _, dest, _, _ in _CONFIG_FLAGS}
    flags["replay_strict"] = getattr(args, "replay_strict", None)
    return load_config(flags=flags, config_path=getattr(args, "config_path", None))


def _registry_for(args):
    path = getattr(args, "registry_path", None)
    return load_registry(path) if path else load_default_registry()


def cmd_assess(args) -> int:
    config = _engine_config(args)
    engine = AssessmentEngine.from_config(config)
    try:
        answer = engine.assess(
            args.query,
            args.image,
            reference=args.ref,
            options=args.option or None,
        )
    except (ImageReadError, QueryEmptyError, FileNotFoundError) as exc:
        return _fatal(str(exc))
    finally:
        engine.close()
    sys.stdout.write(answer.to_json_bytes().decode("utf-8") + "\n")
    return EXIT_OK


def cmd_score(args) -> int:
    config = _engine_config(args)
    rows = load_manifest(args.manifest)
    engine = AssessmentEngine.from_config(config)
    try:
        report = run_scoring(
            rows,
            engine,
            query=args.query,
            impute_value=args.impute,
            workers=args.workers,
        )
    finally:
        engine.close()
    prefix = args.out or os.path.join(config.output_dir, "scoring_report")
    write_scoring_report(report, prefix)
    print(json.dumps(report, sort_keys=True))
    return EXIT_OK if report["counts"]["failed"] == 0 else EXIT_PARTIAL


def cmd_eval(args) -> int:
    config = _engine_config(args)
    items = load_mcq(args.mcq)
    engine = AssessmentEngine.from_config(config)
    try:
        report = run_mcq(items, engine, workers=args.workers)
    finally:
        engine.close()
    prefix = args.out or os.path.join(config.output_dir, "mcq_report")
    write_mcq_report(report, prefix)
    print(json.dumps(report, sort_keys=True))
    errored = sum(1 for item in report["items"] if item.get("error"))
    return EXIT_OK if errored == 0 else EXIT_PARTIAL


def _read_pairs(path: str) -> tuple[list, list]:
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or not {"raw", "mos"} <= set(reader.fieldnames):
            raise LoadError(f"{path}: pairs CSV needs raw and mos columns")
        raw, mos = [], []
        for lineno, record in enumerate(reader, start=2):
            try:
                raw.append(float(record["raw"]))
                mos.append(float(record["mos"]))
            except (TypeError, ValueError) as exc:
                raise LoadError(f"{path}:{lineno}: non-numeric pair") from exc
    return raw, mos


def cmd_calibrate(args) -> int:
    config = _engine_config(args)
    raw, mos = _read_pairs(args.pairs)
    params, report = fit_logistic(raw, mos, form=config.logistic_form)
    patch = {
        "name": args.tool,
        "beta": list(params.beta),
        "form": params.form,
        "fit_report": report.to_json_dict(),
    }
    text = json.dumps(patch, indent=1, sort_keys=True) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        print(json.dumps({"written": args.out, "rss": report.rss, "plcc": report.plcc}))
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _descriptor_json(descriptor) -> dict:
    return {
        "name": descriptor.name,
        "mode": descriptor.mode,
        "description": descriptor.description,
        "binding": {
            "kind": descriptor.binding.kind,
            "kernel": descriptor.binding.kernel,
            "endpoint": descriptor.binding.endpoint,
        },
        "best_at": [
            {"category": b.category, "subtype": b.subtype} for b in descriptor.best_at
        ],
        "beta": list(descriptor.beta) if descriptor.beta else None,
        "native_range": list(descriptor.native_range) if descriptor.native_range else None,
        "higher_better": descriptor.higher_better,
    }


def cmd_tools(args) -> int:
    registry = _registry_for(args)
    if args.action == "list":
        for name in registry.names():
            print(name)
        return EXIT_OK
    if args.action == "describe":
        if not args.name:
            return _fatal("describe needs a tool name")
        canonical = registry.resolve_name(args.name)
        if canonical is None:
            return _fatal(f"unknown tool: {args.name}")
        print(json.dumps(_descriptor_json(registry.get(canonical)), sort_keys=True))
        return EXIT_OK

    # probe: reachability check against the adapter behind a tool (or a target).
    target = args.target or getattr(args, "adapter_target", None)
    if args.name and not target:
        canonical = registry.resolve_name(args.name)
        if canonical is None:
            return _fatal(f"unknown tool: {args.name}")
        target = registry.get(canonical).binding.endpoint
    if not target:
        return _fatal("probe needs --target, --adapter-target, or a tool with an endpoint")
    client = make_adapter_client(target)
    try:
        handshake = client.handshake()
    except AdapterError as exc:
        print(json.dumps({"ok": False, "target": str(target), "error": str(exc)}))
        return EXIT_PARTIAL
    finally:
        client.close()
    print(
        json.dumps(
            {
                "ok": True,
                "target": str(target),
                "version": handshake.get("version"),
                "tools": handshake.get("tools", []),
            },
            sort_keys=True,
        )
    )
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, LoadError, DegenerateDataError, NoConvergenceError) as exc:
        return _fatal(str(exc))
    except AllRowsFailedError as exc:
        return _fatal(str(exc))
    except FileNotFoundError as exc:
        return _fatal(str(exc))
    except GatewayError as exc:
        return _fatal(f"gateway: {exc}")


if __name__ == "__main__":
    sys.exit(main())
