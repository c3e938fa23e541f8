"""Command-line front end: build checkpoints, count params/FLOPs, run
latency benchmarks, and run the invariant suites.

Exit codes: 0 success, 1 check failure, 2 usage or configuration error.
The LE_SEED environment variable overrides the config file's seed.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import bench as bench_mod
from .checkpoint import save_checkpoint
from .checks import run_suite
from .counting import count_model
from .errors import LeDetrError
from .model import LeDetr, ModelConfig


def _parse_hw(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) == 1:
        parts = parts * 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected H,W, got {text!r}")
    return int(parts[0]), int(parts[1])


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ledetr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_build = sub.add_parser("build", help="build a deterministic checkpoint")
    p_build.add_argument("--config", required=True, help="JSON model config path")
    p_build.add_argument("--out", required=True, help="output checkpoint directory")

    p_count = sub.add_parser("count", help="parameter and FLOP accounting")
    p_count.add_argument("--config", required=True)
    p_count.add_argument("--layers", type=int, default=None,
                         help="inference decoder layers (default: config value)")

    p_bench = sub.add_parser("bench", help="latency micro-benchmarks")
    p_bench.add_argument("--targets", required=True,
                         help=f"comma list from: {', '.join(bench_mod.TARGETS)}")
    p_bench.add_argument("--hw", required=True, type=_parse_hw, help="map or image extents H,W")
    p_bench.add_argument("--reps", required=True, type=int)
    p_bench.add_argument("--warmup", required=True, type=int)
    p_bench.add_argument("--threads", type=int, default=1)
    p_bench.add_argument("--csv", default=None, help="also write rows to this CSV path")
    p_bench.add_argument("--k", type=int, default=7, help="NA kernel for the attention targets")
    p_bench.add_argument("--scale", default="M", help="model scale for backbone/full targets")
    p_bench.add_argument("--layers", type=int, default=6, help="decoder layers for the full target")
    p_bench.add_argument("--seed", type=int, default=0)

    p_check = sub.add_parser("check", help="run an invariant suite")
    p_check.add_argument("--suite", required=True,
                         help="na-oracle, grad, prefix, shapes, or all")
    return parser


def cmd_build(args) -> int:
    config = ModelConfig.from_file(args.config)
    model = LeDetr.build(config)
    manifest = save_checkpoint(args.out, model.named_params())
    total = sum(int(np.prod(shape)) for _, shape, _ in manifest)
    print(f"wrote {len(manifest)} tensors ({total:,} params) for scale {config.scale} "
          f"(seed {config.seed}) to {args.out}")
    return 0


def cmd_count(args) -> int:
    config = ModelConfig.from_file(args.config)
    model = LeDetr.build(config)
    report = count_model(model, args.layers)
    print(report.format())
    return 0


def cmd_bench(args) -> int:
    targets = [t.strip() for t in args.targets.split(",") if t.strip()]
    report = bench_mod.run_bench(
        targets, args.hw, args.reps, args.warmup,
        threads=args.threads, k=args.k, scale=args.scale, layers=args.layers, seed=args.seed,
    )
    print(report.format())
    if args.csv:
        bench_mod.write_csv(report, args.csv)
        print(f"csv written to {args.csv}")
    return 0


def cmd_check(args) -> int:
    return 0 if run_suite(args.suite) else 1


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; preserve that
        return int(exc.code or 0)
    handlers = {"build": cmd_build, "count": cmd_count, "bench": cmd_bench, "check": cmd_check}
    try:
        return handlers[args.command](args)
    except LeDetrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
