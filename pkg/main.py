"""
LAWN Agent Simulator
====================

Usage:
  python main.py validate --scenario reference.json
  python main.py run      --mode slm-llm --seeds 7 [--set costs.t_llm=1.5] [--out run.csv]
  python main.py compare  --seeds 0..19 [--workers 4] [--out compare.csv]
  python main.py sweep    --seeds 0..4 --sweep agents.sync_interval=1,9,27 [--out sweep.csv]

Exit codes: 0 ok, 1 invalid scenario, 2 config/usage/parse, 3 simulation, 4 io.
"""

import argparse
import sys
import traceback
from pathlib import Path
from typing import Dict, List, Optional

# Make sure the project directory is on sys.path
sys.path.insert(0, str(Path(__file__).parent))

from config import EXIT_CONFIG, EXIT_SIMULATION, logger
from commands import cmd_compare, cmd_run, cmd_sweep, cmd_validate
from helpers import UnknownOverride, parse_override, parse_seeds


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with the config code instead of argparse's default."""

    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        print(f"  ✗ {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lawnsim", description="Hierarchical air–ground agent simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--scenario", default=None,
                       help="scenario JSON; bare names resolve in $LAWNSIM_SCENARIO_DIR")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted config override (repeatable)")

    def output(p: argparse.ArgumentParser) -> None:
        p.add_argument("--seeds", default="", help='"7", "1,2,5" or "0..19"')
        p.add_argument("--out", default=None, help="output file (default: stdout)")
        p.add_argument("--format", dest="fmt", choices=("csv", "text"), default="csv")

    p = sub.add_parser("validate", help="check a scenario file")
    common(p)

    p = sub.add_parser("run", help="simulate one mode")
    common(p)
    output(p)
    p.add_argument("--seed", type=int, default=None, help="single seed (same as --seeds N)")
    p.add_argument("--mode", required=True, choices=("l-slm", "g-llm", "slm-llm"))

    p = sub.add_parser("compare", help="all modes over a seed list")
    common(p)
    output(p)
    p.add_argument("--mode", dest="modes", action="append", default=None,
                   choices=("l-slm", "g-llm", "slm-llm"), help="restrict modes (repeatable)")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("sweep", help="compare over a grid of overrides")
    common(p)
    output(p)
    p.add_argument("--sweep", dest="sweeps", action="append", default=[],
                   metavar="KEY=V1,V2", help="values to sweep (repeatable)")
    p.add_argument("--mode", dest="modes", action="append", default=None,
                   choices=("l-slm", "g-llm", "slm-llm"))
    p.add_argument("--allow-large-sweep", action="store_true")
    p.add_argument("--workers", type=int, default=1)
    return parser


def _overrides(items: List[str]) -> Dict[str, object]:
    out: Dict[str, object] = {}
    for item in items:
        key, value = parse_override(item)
        out[key] = value
    return out


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        overrides = _overrides(args.overrides)
        seeds = parse_seeds(getattr(args, "seeds", ""))
    except (UnknownOverride, ValueError) as exc:
        print(f"  ✗ {exc}")
        return EXIT_CONFIG

    if args.command == "validate":
        return cmd_validate(args.scenario, overrides)
    if args.command == "run":
        if args.seed is not None:
            seeds = [args.seed]
        return cmd_run(args.scenario, args.mode, seeds, overrides, args.out, args.fmt)
    if args.command == "compare":
        return cmd_compare(args.scenario, seeds, args.modes, overrides, args.out,
                           args.fmt, args.workers)
    return cmd_sweep(args.scenario, seeds, args.sweeps, args.modes, overrides, args.out,
                     args.fmt, args.allow_large_sweep, args.workers)


if __name__ == "__main__":
    try:
        sys.exit(main())
    except KeyboardInterrupt:
        logger.info("\nInterrupted.")
        sys.exit(EXIT_SIMULATION)
    except Exception:
        logger.critical("Unhandled exception:\n%s", traceback.format_exc())
        sys.exit(EXIT_SIMULATION)
