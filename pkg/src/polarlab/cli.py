"""Command-line entry point: ``polarlab <stage> [options]``."""

import argparse
import logging
import sys

from .config import ConfigError, parse_config, parse_override
from .defense import DEFENDERS
from .pipeline import STAGES, Pipeline, StageError

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3
COMMANDS = STAGES + ("run",)


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="flat JSON config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the file)")
    common.add_argument("--out", metavar="DIR", help="output directory (overrides the file)")
    common.add_argument("--defense", choices=sorted(DEFENDERS), help="defense variant")
    common.add_argument("--force", action="store_true",
                        help="redo the stage even if its outputs exist")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override any config key (JSON value)")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")

    parser = argparse.ArgumentParser(prog="polarlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    helps = {
        "gen-data": "generate the synthetic shapes dataset",
        "poison": "poison the training split",
        "train-victim": "train the backdoored victim network",
        "baseline-eval": "clean ACC / ASR of the victim",
        "defend": "train the polarizer of the chosen defense",
        "eval": "ACC / ASR / DER of the defended model",
        "detect": "NPDT detection rates of the defended model",
        "risk-check": "theorem checker on enumerable lattice instances",
        "run": "all stages in order",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def resolve_config(args):
    overrides = dict(parse_override(o) for o in args.overrides)
    for key in ("seed", "out", "defense"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    return parse_config(args.config, overrides)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        print(f"polarlab: config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    pipe = Pipeline(cfg, force=args.force)
    try:
        if args.command == "run":
            pipe.run_all()
        else:
            pipe.stage(args.command)
    except StageError as e:
        print(f"polarlab: {e}", file=sys.stderr)
        return EXIT_STAGE
    if not args.quiet:
        print(open(pipe.path("report.txt"), encoding="utf-8").read(), end="")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
