"""``smpcval`` command line: run the whole experiment or one stage of it.

Exit codes: 0 success, 2 config error, 3 numerical failure, 4 missing artifact.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .closedloop import SweepError
from .config import ConfigError, bundled_config_path, load_config
from .pipeline import STAGES, MissingArtifact, run_stages
from .smpc import ControllerError
from .sysmodel import DimensionError, RiccatiError
from .tightening import TighteningError
from .uncertainty import SamplingError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_MISSING = 0, 2, 3, 4

NUMERICAL_ERRORS = (SweepError, TighteningError, RiccatiError, ControllerError, SamplingError,
                    DimensionError, ArithmeticError, ValueError, RuntimeError)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smpcval",
        description="Sampling-based constraint tightening and penalty-factor validation "
                    "for stochastic MPC.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"run": "all stages: tighten, sweep, select, report",
             "tighten": "compute and validate the tightening profile",
             "sweep": "closed-loop sweep over the penalty grid",
             "select": "choose rho from the stored sweep",
             "report": "render SVG figures from the stored CSVs"}
    for name in ("run",) + STAGES:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, default=None,
                       help="experiment config (YAML); defaults to the bundled example")
        p.add_argument("--out", type=Path, default=None,
                       help="artifact directory (overrides output.directory)")
        p.add_argument("--threads", type=int, default=1,
                       help="worker threads for the sweep; 0 = one per CPU")
        p.add_argument("--seed-override", type=int, default=None, metavar="K",
                       help="replace all seeds: tightening K, validation K+1, sweep K+2")
        p.add_argument("--fast", action="store_true",
                       help="apply the config's 'fast' block (coarse grid)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config or bundled_config_path())
        if args.fast:
            cfg = cfg.with_fast_profile()
        if args.seed_override is not None:
            cfg = cfg.with_seed(args.seed_override)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads < 0:
        print("config error: --threads must be >= 0", file=sys.stderr)
        return EXIT_CONFIG
    out = args.out or (cfg.base_dir / cfg["output"]["directory"])
    stages = STAGES if args.command == "run" else (args.command,)
    try:
        run_stages(cfg, out, stages, threads=args.threads)
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NUMERICAL_ERRORS as exc:
        print(f"numerical failure in {args.command}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    print(f"artifacts in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
