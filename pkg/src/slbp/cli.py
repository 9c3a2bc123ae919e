"""Command line entry point: ``slbp <experiment> --config PATH``."""

from __future__ import annotations

import argparse
import sys
import time

from .config import EXPERIMENTS, ConfigError, load_config

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_STRICT = 3


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="slbp", description="Spatial logistic branching experiments.")
    sub = ap.add_subparsers(dest="experiment", required=True, metavar="experiment")
    for name in EXPERIMENTS:
        sp = sub.add_parser(name, help=f"run the {name} experiment")
        sp.add_argument("--config", required=True, metavar="PATH", help="key = value config file")
        sp.add_argument("--seed", type=int, help="override the master seed")
        sp.add_argument("--jobs", type=int, help="worker processes (default: config value, else 1)")
        sp.add_argument("--out", metavar="DIR", help="output directory (default: config value)")
        sp.add_argument("--strict", action="store_true", help="exit 3 if any acceptance check fails")
        sp.add_argument("--quiet", action="store_true", help="do not print the check summary")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    from .config import validate
    try:
        cfg = load_config(args.config, args.experiment)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.jobs is not None:
            cfg.jobs = args.jobs
        if args.out is not None:
            cfg.out = args.out
        validate(cfg)
    except ConfigError as exc:
        print(f"slbp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    from .experiments import run_experiment, write_result
    t0 = time.perf_counter()
    try:
        res = run_experiment(cfg, cfg.jobs)
    except ConfigError as exc:
        print(f"slbp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = time.perf_counter() - t0
    write_result(cfg, res, cfg.out, cfg.jobs, wall)
    if not args.quiet:
        for c in res.checks:
            print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.detail}")
        print(f"{sum(c.passed for c in res.checks)}/{len(res.checks)} checks passed; outputs in {cfg.out}")
    if args.strict and not res.passed:
        return EXIT_STRICT
    return EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
