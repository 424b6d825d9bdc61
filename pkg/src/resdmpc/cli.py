"""Command line entry point: ``resdmpc simulate`` and ``resdmpc report``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ConfigError
from .harness.config import load_config
from .harness.metrics import format_table, read_summary
from .harness.runner import run_experiment


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="resdmpc", description="Attack-resilient distributed MPC of networked microgrids")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    sim = sub.add_parser("simulate", help="run a closed-loop experiment")
    sim.add_argument("--config", required=True, type=Path)
    sim.add_argument("--controller", choices=["robust", "nonrobust"])
    sim.add_argument("--adi-version", type=int, choices=[1, 2])
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", type=Path, default=Path("out"))
    rep = sub.add_parser("report", help="print the summary of a finished run")
    rep.add_argument("--in", dest="in_dir", required=True, type=Path)
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.command == "simulate":
        try:
            cfg = load_config(args.config).with_overrides(
                controller=args.controller, adi_version=args.adi_version, seed=args.seed)
        except ConfigError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return 2
        result = run_experiment(cfg, args.out)
        print(format_table(result.summary))
        print(f"wrote {len(result.summary) + 1} files to {args.out}")
        return 0
    path = args.in_dir / "summary.csv"
    if not path.exists():
        print(f"error: {path} not found", file=sys.stderr)
        return 2
    print(format_table(read_summary(path)))
    return 0


if __name__ == "__main__":
    sys.exit(main())
