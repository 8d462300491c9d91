"""Command-line entry point: ``vnsemcom <subcommand> --scenario <path> [--out <dir>] [--seed <int>]``.

Exit codes: 0 success, 1 scenario/validation error (nothing written), 2 runtime error.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import experiments
from .errors import ConfigurationError, VNSemComError
from .fedtrain import kept_csv_text
from .report import _atomic_write, emit_csv, emit_json
from .scenario import Scenario, parse_scenario

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vnsemcom", description="VN-SemComNet desk-scale simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in experiments.SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--out", default=None, help="output directory (default: $VNSEMCOM_OUT, then scenario output.dir, then .)")
        p.add_argument("--seed", type=int, default=None, help="override master_seed")
    return parser


def output_dir(arg, scn: Scenario) -> Path:
    return Path(arg or os.environ.get("VNSEMCOM_OUT") or scn.output.dir or ".")


def write_outputs(command: str, rows, scn: Scenario, out: Path, kept_log=None) -> list:
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if scn.output.csv:
        emit_csv(rows, out / f"{command}.csv")
        written.append(out / f"{command}.csv")
    if scn.output.json:
        emit_json(rows, out / f"{command}.json")
        written.append(out / f"{command}.json")
    if kept_log is not None and scn.output.kept_csv:
        _atomic_write(out / f"{command}_kept.csv", kept_csv_text(kept_log))
        written.append(out / f"{command}_kept.csv")
    return written


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        scn = parse_scenario(args.scenario)
        if args.seed is not None:
            scn = scn.replace(master_seed=args.seed)
    except (ConfigurationError, OSError) as exc:
        print(f"vnsemcom: invalid scenario: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        result = experiments.SUBCOMMANDS[args.command](scn)
        rows, summary = result[0], result[1]
        kept = result[2] if len(result) > 2 else None
        write_outputs(args.command, rows, scn, output_dir(args.out, scn), kept)
    except ConfigurationError as exc:
        print(f"vnsemcom: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (VNSemComError, OSError, ArithmeticError) as exc:
        print(f"vnsemcom: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(summary)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
