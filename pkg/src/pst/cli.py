"""Command line entry point.

PST_THREADS must take effect before numpy loads its BLAS backend, so this
module defers every numerical import until after the environment is set.
PST_THREADS=1 pins all BLAS thread pools to one thread, which makes training
and evaluation bit-deterministic for a fixed seed.
"""

from __future__ import annotations

import argparse
import os
import sys

_BLAS_VARS = (
    "OMP_NUM_THREADS",
    "OPENBLAS_NUM_THREADS",
    "MKL_NUM_THREADS",
    "VECLIB_MAXIMUM_THREADS",
    "NUMEXPR_NUM_THREADS",
)


def _apply_thread_env() -> None:
    threads = os.environ.get("PST_THREADS")
    if not threads:
        return
    if not threads.isdigit() or int(threads) < 1:
        raise SystemExit(f"PST_THREADS must be a positive integer, got {threads!r}")
    for var in _BLAS_VARS:
        os.environ[var] = threads


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pst",
        description="Point-cloud-sequence networks: data generation, training, "
                    "evaluation, gradient checks, and ablations.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--spec", required=True, help="key=value scene spec file")
    gen.add_argument("--out", required=True, help="output dataset directory")

    train = sub.add_parser("train", help="train a model and write run artifacts")
    train.add_argument("--task", required=True, choices=["seg", "cls"])
    train.add_argument("--config", help="key=value overrides file")
    train.add_argument("--preset", default="desk",
                       choices=["synthia", "kitti", "msr", "desk"])
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--out", required=True, help="output run directory")

    ev = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    gc.add_argument("--module", default=None,
                    choices=["autodiff", "pointops", "re", "stsa", "networks"])
    gc.add_argument("--instances", type=int, default=10)
    gc.add_argument("--tol", type=float, default=None,
                    help="relative error tolerance (default 1e-4)")

    ab = sub.add_parser("ablate", help="train every combination of the given flags")
    ab.add_argument("--flags", default="re,stsa",
                    help="comma-separated subset of: re, stsa")
    ab.add_argument("--task", default="seg", choices=["seg", "cls"])
    ab.add_argument("--seeds", default="0,1,2,3,4", help="comma-separated seeds")
    ab.add_argument("--steps", type=int, default=None,
                    help="override training steps per run")
    ab.add_argument("--config", help="key=value overrides file")
    ab.add_argument("--out", help="directory for ablation.json")
    return parser


def main(argv=None) -> int:
    _apply_thread_env()
    args = _build_parser().parse_args(argv)

    from .autodiff import ContractError, DimensionError, NonFiniteError
    from .formats import FormatError, canonical_json, read_config

    try:
        if args.command == "gen-data":
            from .datagen import write_dataset

            manifest = write_dataset(args.out, read_config(args.spec))
            print(canonical_json(manifest))
            return 0

        if args.command == "train":
            from .train import run_training

            overrides = read_config(args.config) if args.config else None
            outcome = run_training(args.task, args.preset, overrides, args.seed,
                                   args.out)
            print(canonical_json(outcome.metrics))
            return 0

        if args.command == "eval":
            from .train import evaluate_checkpoint

            print(canonical_json(evaluate_checkpoint(args.checkpoint, args.data)))
            return 0

        if args.command == "gradcheck":
            from .gradcheck import TOL, format_report, run_checks

            tol = TOL if args.tol is None else args.tol
            results = run_checks(args.module, args.instances, tol=tol)
            print(format_report(results))
            return 0 if all(r.passed for r in results) else 1

        if args.command == "ablate":
            from .train import run_ablation

            flags = [f.strip() for f in args.flags.split(",") if f.strip()]
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
            overrides = read_config(args.config) if args.config else None
            manifest = run_ablation(args.task, flags, seeds, args.steps, overrides,
                                    args.out)
            summary = {k: manifest[k] for k in ("task", "metric", "medians",
                                                "deltas_vs_base")}
            print(canonical_json(summary))
            return 0
    except (ContractError, DimensionError, NonFiniteError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 2
    raise AssertionError("unreachable")


if __name__ == "__main__":
    sys.exit(main())
