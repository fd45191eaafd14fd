"""Command-line entry point: ``guidelab <command> [options]``.

Exit status is 0 when every check of the command passes, 1 when a check
fails and 2 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from guidelab.errors import GuidelabError
from guidelab.harness import COMMANDS, ExperimentConfig, Lab, cmd_verify

log = logging.getLogger("guidelab")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="guidelab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("verify", *COMMANDS):
        p = sub.add_parser(name)
        p.add_argument("--config", help="experiment config (INI); defaults are used if omitted")
        p.add_argument("--seed", type=int, help="master seed (overrides the config)")
        p.add_argument("--out", help="output directory (overrides the config)")
        p.add_argument("--threads", type=int, help="worker threads for sweep cells")
        p.add_argument("-q", "--quiet", action="store_true")
        if name == "verify":
            p.add_argument("--fault", action="store_true",
                           help="shift one mixture mean by 1e-3 on one side of every identity")
        if name == "sample":
            p.add_argument("--p-drop", type=float, default=0.1,
                           help="which trained variant to sample from")
    return parser


def load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    changes = {k: v for k, v in (("seed", args.seed), ("out", args.out),
                                 ("threads", args.threads)) if v is not None}
    return replace(config, **changes) if changes else config


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        config = load_config(args)
        if args.command == "verify":
            result = cmd_verify(config, fault=args.fault)
        else:
            lab = Lab(config, log=log.info)
            kwargs = {"p": args.p_drop} if args.command == "sample" else {}
            result = COMMANDS[args.command](config, lab, **kwargs)
    except (GuidelabError, ValueError, OSError) as exc:
        print(f"guidelab {args.command}: error: {exc}", file=sys.stderr)
        return 2
    for check in result.checks:
        print(check.line())
    for path in result.files:
        log.info("wrote %s", path)
    return 0 if result.passed else 1


if __name__ == "__main__":
    sys.exit(main())
