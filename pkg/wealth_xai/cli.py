"""
wealth-xai: command-line entry point.

Subcommands: generate | train | fit-head | explain <method> [SITE ...] |
eval-cross-period | report

Exit codes: 0 ok, 1 usage error, 2 data error, 3 numeric failure. Errors are reported
on stderr as "Error in <command>: <message>".
"""
from __future__ import annotations

import argparse
import logging
import sys

from . import __version__, commands
from .config import load_config
from .errors import UsageError, WealthXaiError

logger = logging.getLogger("wealth_xai")


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(UsageError.exit_code, f"{self.prog}: error: {message}\n")


def _seed(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in 64 unsigned bits: {text}")
    return value


def _positive(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1: {text}")
    return value


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML run configuration")
    common.add_argument("--seed", type=_seed, metavar="U64", help="top-level seed")
    common.add_argument("--jobs", type=_positive, metavar="N", help="worker processes")
    common.add_argument("--out", metavar="DIR", help="output root")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")

    parser = ArgumentParser(prog="wealth-xai", description="Nightlight transfer learning and explanation on synthetic imagery.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=ArgumentParser)
    sub.required = True
    sub.add_parser("generate", parents=[common], help="write the synthetic corpus")
    sub.add_parser("train", parents=[common], help="two-stage nightlight training")
    sub.add_parser("fit-head", parents=[common], help="ridge wealth head, 1x1 and 3x3 variants")
    explain = sub.add_parser("explain", parents=[common], help="perturbation, attribution and feature visualization")
    explain.add_argument("method", help=f"one of: {', '.join(commands.EXPLAIN_METHODS)}")
    explain.add_argument("sites", nargs="*", help="site ids for attribution panels (default: lowest/median/highest)")
    sub.add_parser("eval-cross-period", parents=[common], help="train/test across survey phases")
    sub.add_parser("report", parents=[common], help="consolidated Markdown report")
    return parser


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    logger.handlers[:] = [handler]
    logger.setLevel(level)
    logger.propagate = False


def run(args: argparse.Namespace) -> int:
    cfg = load_config(args.config, out=args.out, seed=args.seed, jobs=args.jobs)
    cmd = args.command
    if cmd == "generate":
        stage = commands.cmd_generate(cfg)
    elif cmd == "train":
        stage = commands.cmd_train(cfg)
    elif cmd == "fit-head":
        stage = commands.cmd_fit_head(cfg)
    elif cmd == "explain":
        stage = commands.cmd_explain(cfg, args.method, args.sites or None)
    elif cmd == "eval-cross-period":
        stage = commands.cmd_eval_cross_period(cfg)
    else:
        stage = commands.cmd_report(cfg)
    print(stage.path)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return run(args)
    except WealthXaiError as e:
        print(f"Error in {args.command}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
