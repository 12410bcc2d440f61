"""Command-line entry point: ``train``, ``evaluate`` and ``compare``.

Exit codes: 0 success, 2 configuration error, 3 I/O or file-format error.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .exceptions import ComparisonError, ConfigurationError, DataError, FormatError
from .experiment import compare_report, evaluate, load_config, run

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _train(args) -> int:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["output.dir"] = args.out
    if overrides:
        cfg = cfg.with_overrides(**overrides)
    result = run(cfg)
    s = result.summary
    print(f"{s['mode']} run finished: {s['epochs']} epochs, final val acc {s['final_val_acc']:.2f}%, "
          f"total {s['total_flops']:.3e} FLOPs -> {result.output_dir}")
    return EXIT_OK


def _evaluate(args) -> int:
    acc = evaluate(args.checkpoint, args.data, args.split)
    print(f"{args.split} accuracy: {acc:.4f}%")
    return EXIT_OK


def _compare(args) -> int:
    report = compare_report(*args.runs, threshold_fraction=args.threshold_fraction)
    sys.stdout.write(report.table())
    if args.out:
        report.write(args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incremental-cnn", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log every epoch and event")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a regular or incremental training experiment")
    p.add_argument("--config", required=True, help="key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", help="override output.dir")
    p.set_defaults(func=_train)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on the val or test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="CIFAR-10 binary directory (default: $CIFAR10_ROOT)")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.set_defaults(func=_evaluate)

    p = sub.add_parser("compare", help="tabulate completed runs against the regular baseline")
    p.add_argument("runs", nargs="+", help="run output directories")
    p.add_argument("--out", help="also write compare.csv and plot-ready CSVs here")
    p.add_argument("--threshold-fraction", type=float, default=None,
                   help="fraction of the baseline's final val accuracy (default 0.9)")
    p.set_defaults(func=_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigurationError, ComparisonError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
