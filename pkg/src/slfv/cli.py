"""Command line front end: validate configs, run experiments, emit plot data.

Exit codes: 0 on success, 1 when the config (or requested view) is
invalid, 2 when a run fails at execution time.  SLFV_SEED and
SLFV_THREADS override the config seed and the default thread count;
the --seed and --threads flags override both.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import List, Optional

from .config import ConfigError, load_config
from .runner import PLOT_VIEWS, PlotDataError, emit_plotdata, run

SEED_ENV = "SLFV_SEED"
THREADS_ENV = "SLFV_THREADS"


def _env_int(name: str) -> Optional[int]:
    raw = os.environ.get(name)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError([f"environment variable {name} must be an integer, got {raw!r}"])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slfv",
        description="Spatial coalescent experiments on the two-dimensional torus.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    validate = sub.add_parser("validate", help="check a config file and report every problem")
    validate.add_argument("--config", required=True, metavar="PATH")

    runner = sub.add_parser("run", help="execute an experiment into its artifact directory")
    runner.add_argument("--config", required=True, metavar="PATH")
    runner.add_argument("--seed", type=int, metavar="U64", help="override the config seed")
    runner.add_argument("--threads", type=int, metavar="N", help="worker threads (default 1)")
    runner.add_argument("--out", metavar="DIR", help="override the output directory")
    runner.add_argument(
        "--resume", action="store_true", help="continue an interrupted run in place"
    )

    plot = sub.add_parser("plotdata", help="emit a tidy CSV view of a finished artifact")
    plot.add_argument("--artifact", required=True, metavar="DIR")
    plot.add_argument("--view", required=True, choices=PLOT_VIEWS)
    plot.add_argument("--out", metavar="PATH", help="write the CSV here instead")

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "validate":
            config = load_config(args.config)
            print(f"ok: {config.kind} experiment", end="")
            if config.regime_class is not None:
                print(f", {config.regime_class.kind} regime", end="")
            print()
            return 0

        if args.command == "run":
            config = load_config(args.config)
            seed = args.seed if args.seed is not None else _env_int(SEED_ENV)
            threads = args.threads if args.threads is not None else _env_int(THREADS_ENV)
            config = config.with_overrides(
                seed=seed, output=Path(args.out) if args.out else None
            )
            out = run(config, threads=threads or 1, resume=args.resume)
            print(f"artifact written to {out}")
            return 0

        target = emit_plotdata(args.artifact, args.view, Path(args.out) if args.out else None)
        print(f"plot data written to {target}")
        return 0

    except (ConfigError, PlotDataError) as exc:
        for line in str(exc).splitlines():
            print(f"error: {line}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - the CLI boundary reports, not raises
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
