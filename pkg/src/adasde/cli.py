"""Command-line entry point: ``adasde {train,distill,sample,decompose,sweep}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .harness import ConfigError, run_experiment

COMMANDS = ("train", "distill", "sample", "decompose", "sweep")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adasde", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train the toy score network on the double-circle set",
        "distill": "optimise per-step coefficients against a refined teacher",
        "sample": "draw samples with a solver and write them as CSV",
        "decompose": "gradient / discretization / total error over steps and gamma",
        "sweep": "error decomposition repeated over several seeds",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="YAML or JSON config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out-dir", default="out", help="artifact directory (default: out)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run_experiment(args.command, args.config, args.out_dir, seed=args.seed)
    except (ConfigError, ValueError, OSError, RuntimeError) as exc:
        print(f"adasde {args.command}: error: {exc}", file=sys.stderr)
        return 1
    print(out / "manifest.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
