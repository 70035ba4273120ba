"""Command-line entry points: run, analyze, diff-snapshots."""

from __future__ import annotations

import argparse
import sys

from .errors import ConfigurationError, SolverError, StateError
from . import driver


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="mmfsim",
        description="Multiscale moist atmospheric simulator (coarse grid "
                    "with embedded fine grids) and its cost analyzer.")
    sub = p.add_subparsers(dest="command", required=True)

    runp = sub.add_parser("run", help="execute a configured simulation")
    runp.add_argument("--config", required=True, help="flat key=value file")
    runp.add_argument("--preset", choices=("desk", "full"),
                      help="override run.preset")
    runp.add_argument("--mode", choices=("standard", "mmf"),
                      help="override run.mode")
    runp.add_argument("--workers", type=int,
                      help="thread pool size for embedded grids")
    runp.add_argument("--seed", type=int, help="override run.seed")
    runp.add_argument("--output-dir", help="override run.output_dir")

    ana = sub.add_parser("analyze", help="evaluate the closed-form cost model")
    ana.add_argument("--config", required=True,
                     help="config file with cost.* keys")

    diff = sub.add_parser("diff-snapshots",
                          help="compare two snapshot files field by field")
    diff.add_argument("a")
    diff.add_argument("b")
    diff.add_argument("--tol", type=float, default=0.0,
                      help="max allowed per-field abs difference")
    return p


def _cmd_run(args) -> int:
    cfg = driver.read_config(args.config)
    if args.preset is not None:
        cfg.preset = args.preset
    if args.mode is not None:
        cfg.mode = args.mode
    if args.workers is not None:
        cfg.workers = args.workers
    if args.seed is not None:
        cfg.seed = args.seed
    if args.output_dir is not None:
        cfg.output_dir = args.output_dir
    return driver.run(cfg)


def _cmd_analyze(args) -> int:
    cfg = driver.read_config(args.config)
    cfg.mode = "analyze"
    return driver.run(cfg)


def _cmd_diff(args) -> int:
    rows = driver.diff_snapshots(args.a, args.b)
    worst = max(d for _, d in rows)
    for name, d in rows:
        print(f"{name:<10} max|diff| = {d:.17e}")
    if worst <= args.tol:
        print(f"PASS (worst {worst:.3e} <= tol {args.tol:.3e})")
        return 0
    print(f"DIFFER (worst {worst:.3e} > tol {args.tol:.3e})")
    return 1


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return _cmd_run(args)
        if args.command == "analyze":
            return _cmd_analyze(args)
        return _cmd_diff(args)
    except ConfigurationError as exc:
        print(f"error[config]: {exc}", file=sys.stderr)
        return driver.EXIT_CONFIG
    except (SolverError, StateError, FloatingPointError) as exc:
        print(f"error[numerical]: {exc}", file=sys.stderr)
        return driver.EXIT_NUMERICAL
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return driver.EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
