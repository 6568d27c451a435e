"""Command-line entry point: ``polarcheck <command> --config C --out D --seed S``."""

from __future__ import annotations

import argparse
import logging
import sys

import yaml

from .experiments import COMMANDS, ExperimentConfig


def _assignment(text: str):
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key, yaml.safe_load(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polarcheck",
                                     description="Polarity-consistency faithfulness experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "train": "train every configured model and seed",
        "evaluate": "full metric grid over trained checkpoints",
        "ablate": "violation of attention-gradient ablations",
        "depth-study": "violation against classifier depth",
        "datamap": "per-example rank correlation vs confidence change",
        "behavior": "per-rank weight and confidence profiles of violators",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        p.add_argument("--set", dest="overrides", action="append", default=[], type=_assignment,
                       metavar="KEY=VALUE", help="override a config key (dotted path, YAML value)")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = dict(args.overrides)
    if args.seed is not None:
        overrides["seeds"] = [args.seed]
    try:
        config = ExperimentConfig.load(args.config, overrides)
        COMMANDS[args.command](config, args.out)
    except (ValueError, FileNotFoundError) as err:
        print(f"polarcheck {args.command}: error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
