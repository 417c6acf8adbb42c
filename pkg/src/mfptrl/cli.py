"""Command-line entry point: ``run``, ``compare`` and ``landscape``."""
from __future__ import annotations

import argparse
import dataclasses
import math
import sys
from pathlib import Path

from . import bench
from .gridworld import ParseError, ValidationError
from .mdp import BudgetExhausted
from .reachability import DEFAULT_CLIP, IoFailure

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mfptrl", description="Grid-world reinforcement learning benchmarks.")
    parser.add_argument("--out", type=Path, help="output directory (overrides the config)")
    parser.add_argument("--seed-override", type=_int_list, metavar="LIST", help="comma-separated seeds")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one config over its seeds")
    run.add_argument("--config", type=Path, required=True)

    cmp_ = sub.add_parser("compare", help="run several configs on one map and compare")
    cmp_.add_argument("--config", type=Path, nargs="+", required=True)

    land = sub.add_parser("landscape", help="export passage-time heatmaps during a run")
    land.add_argument("--config", type=Path, required=True)
    land.add_argument("--at", type=_int_list, required=True, metavar="N,N,...")
    land.add_argument("--clip", type=float, default=DEFAULT_CLIP)
    return parser


def _configure(path: Path, args) -> bench.ExperimentConfig:
    cfg = bench.load_config(path)
    if args.out is not None:
        cfg.out_dir = args.out
    if args.seed_override:
        cfg = dataclasses.replace(cfg, seeds=tuple(args.seed_override))
    return cfg


def _show(value: float) -> str:
    return "NA" if math.isinf(value) else f"{value:g}"


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = _configure(args.config, args)
            report = bench.run_experiment(cfg)
            report.write(cfg.out_dir)
            q1, med, q3 = report.summary()["samples_to_converge"]
            done = sum(r.converged for r in report.runs)
            print(f"{cfg.algorithm}: {done}/{len(report.runs)} converged, "
                  f"samples median {_show(med)} [{_show(q1)}, {_show(q3)}]")
        elif args.command == "compare":
            cfgs = [_configure(p, args) for p in args.config]
            table = bench.compare(cfgs)
            table.write(cfgs[0].out_dir)
            for alg, samples, wall, sweeps in table.rows():
                print(f"{alg:10s} samples {_show(samples):>10s}  sweeps {_show(sweeps):>8s}  wall {wall:10.1f} ms")
            for a, b, wa, wb, ties in table.wins():
                print(f"{a} vs {b}: {wa}-{wb} ({ties} ties)")
        else:
            cfg = _configure(args.config, args)
            for path in bench.landscape(cfg, args.at, clip=args.clip):
                print(path)
    except (bench.ConfigError, ParseError, ValidationError, ValueError, BudgetExhausted) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IoFailure, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
