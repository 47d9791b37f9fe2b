"""Command-line entry point: ``spasim run|model|report|profiles``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .cluster import builtin_profile, profile_names


def _cmd_run(args: argparse.Namespace) -> int:
    from dataclasses import replace

    from .experiment import ExperimentConfig, execute

    config = ExperimentConfig.load(args.config)
    if args.reps is not None:
        config = replace(config, repetitions=args.reps)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    out = args.out if args.out is not None else config.output_dir
    for path in execute(config, out):
        print(path)
    return 0


def _cmd_model(args: argparse.Namespace) -> int:
    from .experiment import write_model_curve

    print(write_model_curve(args.configuration, args.workers_from, args.workers_to, args.out))
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    from .experiment import report_dir

    src = Path(args.input)
    if not (src / "runs.csv").is_file():
        raise FileNotFoundError(f"{src / 'runs.csv'} not found")
    for path in report_dir(src, args.out if args.out is not None else src):
        print(path)
    return 0


def _cmd_profiles(args: argparse.Namespace) -> int:
    for name in profile_names():
        prof = builtin_profile(name)
        classes = ", ".join(f"{c.name} {c.count}x({c.cores}c/{c.memory_gb:g}GB)" for c in prof.node_classes)
        print(f"{name}: backfill cap {prof.backfill_user_cap}; {classes}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spasim", description="Batch vs pilot Spark-on-HPC simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment matrix from a JSON config")
    p.add_argument("--config", required=True, help="JSON experiment config")
    p.add_argument("--reps", type=int, help="override repetitions")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--out", help="output directory (default: config output_dir)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("model", help="tabulate model makespan against average workers")
    p.add_argument("--configuration", type=int, required=True, choices=[1, 2, 3, 4])
    p.add_argument("--workers-from", type=int, default=1)
    p.add_argument("--workers-to", type=int, required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.set_defaults(func=_cmd_model)

    p = sub.add_parser("report", help="derive summary CSVs from a results directory")
    p.add_argument("--in", dest="input", required=True, help="directory containing runs.csv")
    p.add_argument("--out", help="output directory (default: same as --in)")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("profiles", help="inspect built-in cluster profiles")
    psub = p.add_subparsers(dest="action", required=True)
    psub.add_parser("list").set_defaults(func=_cmd_profiles)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, KeyError) as exc:
        print(f"spasim: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
