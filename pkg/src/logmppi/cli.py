"""``logmppi`` command line.

Verbs::

    logmppi run CONFIG [--seed S] [--trials T] [--threads K] [--jobs J] [--out DIR] [--acceptance]
    logmppi compare CONFIG_A CONFIG_B [same flags]
    logmppi plot-data RUN_DIR --kind {rollout_cloud,state_trace,world_map} [--out DIR]
    logmppi validate-config CONFIG [CONFIG ...]

CONFIG is a YAML file or the name of a bundled preset (``logmppi
validate-config --list`` prints them).  Exit codes: 0 ran and wrote
results, 1 configuration or harness error, 2 an acceptance threshold was
not met (only with ``--acceptance``).  ``LOGMPPI_THREADS`` overrides the
default worker count.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import backend
from .config import ConfigError, preset_names, resolve_config
from .experiments import (
    PLOT_KINDS,
    SeedMismatchError,
    UsageError,
    check_acceptance,
    compare_schemes,
    emit_plot_data,
    format_table,
    run_experiment,
    with_overrides,
)

EXIT_OK, EXIT_ERROR, EXIT_THRESHOLD = 0, 1, 2


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, help="override the config's base seed")
    p.add_argument("--trials", type=int, help="override the config's trial count")
    p.add_argument("--threads", type=int, help="rollout worker threads per trial (default: all cores)")
    p.add_argument("--jobs", type=int, default=1, help="trials run in parallel processes (default 1)")
    p.add_argument("--out", type=Path, default=Path("results"), help="output directory (default ./results)")
    p.add_argument("--no-rollouts", action="store_true", help="skip saving the trial-0 rollout cloud")
    p.add_argument("--acceptance", action="store_true", help="exit 2 when the config's acceptance thresholds fail")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="logmppi", description="MPPI / log-MPPI benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment config")
    p.add_argument("config")
    _add_run_flags(p)

    p = sub.add_parser("compare", help="run two configs on the same worlds and tabulate them side by side")
    p.add_argument("config_a")
    p.add_argument("config_b")
    _add_run_flags(p)

    p = sub.add_parser("plot-data", help="write CSV plot data from run artifacts")
    p.add_argument("run_dir", type=Path)
    p.add_argument("--kind", required=True, help=f"one of {', '.join(PLOT_KINDS)}")
    p.add_argument("--out", type=Path, help="output directory (default: next to each trial's artifacts)")

    p = sub.add_parser("validate-config", help="check config files without running them")
    p.add_argument("configs", nargs="*")
    p.add_argument("--list", action="store_true", help="list the bundled presets")
    return parser


def _load(ref: str, args):
    cfg = resolve_config(ref)
    if args.trials is not None and args.trials < 0:
        raise ConfigError([f"--trials: must be >= 0 (got {args.trials})"])
    if args.seed is not None and args.seed < 0:
        raise ConfigError([f"--seed: must be >= 0 (got {args.seed})"])
    return with_overrides(cfg, seed=args.seed, trials=args.trials)


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError([f"--threads: must be >= 1 (got {args.threads})"])
        return args.threads
    try:
        return backend.default_threads()
    except ValueError:
        raise ConfigError([f"LOGMPPI_THREADS: expected an integer (got {os.environ.get('LOGMPPI_THREADS')!r})"])


def cmd_run(args) -> int:
    cfg = _load(args.config, args)
    res = run_experiment(cfg, args.out, threads=_threads(args), jobs=max(1, args.jobs),
                         save_rollouts=not args.no_rollouts)
    print(format_table(res["rows"], res["columns"]), end="")
    print(f"results written to {args.out}")
    if args.acceptance:
        failed = [f for row in res["rows"] for f in check_acceptance(cfg, row)]
        for f in failed:
            print(f"acceptance: {f}", file=sys.stderr)
        if failed:
            return EXIT_THRESHOLD
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg_a = _load(args.config_a, args)
    cfg_b = _load(args.config_b, args)
    res = compare_schemes(cfg_a, cfg_b, args.out, threads=_threads(args), jobs=max(1, args.jobs),
                          save_rollouts=not args.no_rollouts)
    print(format_table(res["rows"], res["columns"]), end="")
    print(f"results written to {args.out}")
    if args.acceptance:
        failed = []
        for cfg, row in zip((cfg_a, cfg_b), res["rows"]):
            failed += [f"{row['scheme']}: {f}" for f in check_acceptance(cfg, row)]
        for f in failed:
            print(f"acceptance: {f}", file=sys.stderr)
        if failed:
            return EXIT_THRESHOLD
    return EXIT_OK


def cmd_plot_data(args) -> int:
    for path in emit_plot_data(args.run_dir, args.kind, args.out):
        print(path)
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.list:
        print("\n".join(preset_names()))
        return EXIT_OK
    if not args.configs:
        raise UsageError("validate-config needs at least one config (or --list)")
    status = EXIT_OK
    for ref in args.configs:
        try:
            cfg = resolve_config(ref)
        except ConfigError as exc:
            status = EXIT_ERROR
            print(f"{ref}: invalid", file=sys.stderr)
            for err in exc.errors:
                print(f"  {err}", file=sys.stderr)
        else:
            print(f"{ref}: ok ({cfg.task}, {cfg.scheme}, {cfg.trials} trials)")
    return status


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "plot-data": cmd_plot_data, "validate-config": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print("configuration error:", file=sys.stderr)
        for err in exc.errors:
            print(f"  {err}", file=sys.stderr)
        return EXIT_ERROR
    except (UsageError, SeedMismatchError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
