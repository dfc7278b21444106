"""Command-line entry point: ``s2ip <command> --config <path> [--seed N]
[--out DIR]``. Exits 0 on success; configuration and runtime errors print a
diagnostic and exit nonzero."""

from __future__ import annotations

import argparse
import sys

from .config import ConfigError, RunConfig, parse_config
from .harness import COMMANDS, HarnessError, run


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2ip",
        description="Train and evaluate a prompt-enhanced forecaster over a "
                    "frozen miniature transformer.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None,
                        help="key=value configuration file (defaults apply "
                             "when omitted)")
    parser.add_argument("--seed", type=int, default=None,
                        help="overrides train.seed from the config")
    parser.add_argument("--out", default="s2ip_out",
                        help="output directory for artifacts")
    parser.add_argument("--checkpoint", default=None,
                        help="checkpoint path for evaluate/forecast/"
                             "export-embeddings (default: <out>/model.ckpt)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config) if args.config else RunConfig()
    except FileNotFoundError:
        print(f"error: config file not found: {args.config}", file=sys.stderr)
        return 2
    except ConfigError as exc:
        print(f"error: invalid configuration: {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else config["train.seed"]
    try:
        artifacts = run(args.command, config, seed, args.out, args.checkpoint)
    except (HarnessError, ValueError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in artifacts:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
