"""Command line: ``beamcast <experiment> --config PATH --seed N --out DIR``."""

from __future__ import annotations

import argparse
import logging
import sys

from ..errors import BeamcastError
from .config import ScenarioConfig, parse_config
from .experiments import EXPERIMENTS, run_experiment


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beamcast",
                                description="Run a beam-prediction simulation experiment.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="key = value configuration file (defaults if omitted)")
    p.add_argument("--seed", type=int, default=None, help="master seed (overrides the config)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--trials", type=int, default=None, help="override the trial count")
    p.add_argument("--workers", type=int, default=None,
                   help="worker processes (BEAMCAST_WORKERS takes precedence)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(args.config) if args.config else ScenarioConfig()
        if args.trials is not None:
            cfg = cfg.replace(trials=args.trials)
        if args.seed is not None and args.seed < 0:
            raise ValueError("seed must be non-negative")
        outputs = run_experiment(cfg, args.experiment, args.seed, args.out, args.workers)
    except (BeamcastError, OSError, ValueError) as exc:
        print(f"beamcast: error: {exc}", file=sys.stderr)
        return 2
    for path in outputs:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
