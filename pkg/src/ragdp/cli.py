"""Command-line entry point: ``ragdp <command> [--config F] [--seed S] [--out D] [--override k=v]``."""

from __future__ import annotations

import argparse
import itertools
import json
import subprocess
import sys
from pathlib import Path

from . import pipeline
from .config import load_config

COMMANDS = {
    "generate-data": "data",
    "pretrain": "pretrain",
    "train-extractor": "train-extractor",
    "build-kb": "build-kb",
    "dp-finetune": "dp-finetune",
    "sample": "sample",
    "evaluate": "evaluate",
}


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=default, help="JSON config file")
    parser.add_argument("--seed", type=int, default=default, help="top-level u64 seed")
    parser.add_argument("--out", default=default, help="output directory (default: out)")
    parser.add_argument("--override", action="append", default=argparse.SUPPRESS if suppress else [],
                        metavar="KEY=VALUE", help="dotted config key override, repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ragdp", description=__doc__)
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in [*COMMANDS, "run"]:
        _global_flags(sub.add_parser(name), suppress=True)
    sw = sub.add_parser("sweep", help="run the whole pipeline once per grid cell")
    _global_flags(sw, suppress=True)
    sw.add_argument("--param", action="append", required=True, metavar="KEY=V1,V2,...",
                    help="config key and comma-separated JSON values, repeatable")
    return parser


def _parse_grid(items: list[str]) -> list[tuple[str, list[str]]]:
    grid = []
    for item in items:
        key, sep, values = item.partition("=")
        if not sep or not values:
            raise ValueError(f"--param must be KEY=V1,V2,..., got {item!r}")
        grid.append((key, values.split(",")))
    return grid


def run_sweep(args, out: Path) -> dict:
    grid = _parse_grid(args.param)
    base = []
    if args.config:
        base += ["--config", str(args.config)]
    if args.seed is not None:
        base += ["--seed", str(args.seed)]
    for o in args.override:
        base += ["--override", o]
    cells = []
    for combo in itertools.product(*(vals for _, vals in grid)):
        overrides = [f"{k}={v}" for (k, _), v in zip(grid, combo)]
        cell_dir = out / "_".join(o.replace("/", "-") for o in overrides)
        cmd = [sys.executable, "-m", "ragdp", "run", "--out", str(cell_dir), *base]
        for o in overrides:
            cmd += ["--override", o]
        proc = subprocess.run(cmd, capture_output=True, text=True)
        cell = {"overrides": overrides, "out": str(cell_dir), "returncode": proc.returncode}
        if proc.returncode == 0:
            cell["eval"] = json.loads((cell_dir / "eval.json").read_text())
        else:
            cell["error"] = proc.stderr.strip().splitlines()[-1:] or [""]
        cells.append(cell)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps(cells, sort_keys=True, indent=1) + "\n")
    return {"cells": len(cells), "failed": sum(c["returncode"] != 0 for c in cells)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out or "out")
    try:
        if args.command == "sweep":
            result = run_sweep(args, out)
            if result["failed"]:
                raise RuntimeError(f"{result['failed']} of {result['cells']} sweep cells failed")
        else:
            cfg = load_config(args.config, args.override, args.seed)
            if args.command == "run":
                result = pipeline.run_pipeline(cfg, out)
            else:
                result = pipeline.STAGE_FUNCS[COMMANDS[args.command]](cfg, out)
    except Exception as exc:  # noqa: BLE001 - every failure becomes an error record
        record = {"error": type(exc).__name__, "message": str(exc), "command": args.command}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "out": str(out), "ok": True}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
