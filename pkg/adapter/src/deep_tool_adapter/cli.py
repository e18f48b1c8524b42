"""Process entry point.

Default is stdio serving with the built-in manifest (ECHO plus LPIPS).
``--http PORT`` switches transports; port 0 asks the OS for a free port,
announced as a ``{"port": N}`` line on stdout before serving starts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from .manifest import ManifestError, default_manifest, load_manifest, validate_manifest
from .server import run_http, run_stdio
from .service import AdapterService


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deep-tool-adapter",
        description="Serve perceptual scoring tools over the adapter wire protocol.",
    )
    parser.add_argument(
        "--manifest",
        default=None,
        help="manifest JSON path (default: built-in manifest serving ECHO and LPIPS)",
    )
    parser.add_argument(
        "--http",
        type=int,
        default=None,
        metavar="PORT",
        help="serve HTTP on this port instead of stdio (0 picks a free port)",
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="override the manifest feature seed"
    )
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        manifest = load_manifest(args.manifest) if args.manifest else default_manifest()
        if args.seed is not None:
            manifest = validate_manifest(
                dataclasses.replace(manifest, seed=args.seed)
            )
        service = AdapterService(manifest)
    except ManifestError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return 2
    try:
        if args.http is not None:
            run_http(
                service,
                args.http,
                announce=lambda port: print(json.dumps({"port": port}), flush=True),
            )
        else:
            run_stdio(service)
    except KeyboardInterrupt:
        pass
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
