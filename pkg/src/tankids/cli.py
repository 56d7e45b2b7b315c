"""Command-line entry point.

Each stage reads and writes files under ``--out``; ``pipeline`` chains
collect, train and evaluate and adds a manifest.

Exit codes: 0 success, 1 usage error, 2 data or config error, 3 internal
invariant violation.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from . import pipeline
from .config import ConfigError, PipelineConfig, parse_kv
from .dataset import DatasetFormatError, SafetyError
from .protocol import ModbusError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INVARIANT = 3

log = logging.getLogger("tankids")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which here means a data error
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _intensities(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not values:
        raise argparse.ArgumentTypeError("empty intensity list")
    return values


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key=value config file (default: built-in defaults)")
    common.add_argument("--seed", type=int, help="master seed (default 0)")
    common.add_argument("--out", type=Path, default=Path("run"), help="output directory (default ./run)")
    common.add_argument(
        "--intensity",
        type=_intensities,
        help="comma-separated training intensities, e.g. 0.01,0.1,0.2 (must be among the testing intensities)",
    )
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="override one config key; repeatable",
    )
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="tankids", description="Water-tank testbed: FDI data collection and random-forest detection.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("simulate", parents=[common], help="write the unattacked plant trajectory to CSV")
    p.add_argument("--steps", type=int, default=10_000, help="plant steps to simulate (default 10000)")
    sub.add_parser("collect", parents=[common], help="collect normal and attacked datasets")
    sub.add_parser("train", parents=[common], help="grid-search and fit one forest per training intensity")
    sub.add_parser("evaluate", parents=[common], help="score the models on the common test set")
    sub.add_parser("pipeline", parents=[common], help="collect, train and evaluate, then write a manifest")
    return parser


def load_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.overrides:
        cfg = PipelineConfig.from_mapping(parse_kv("\n".join(args.overrides), "--set"), cfg)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.intensity is not None:
        try:
            cfg = replace(cfg, train_intensities=args.intensity)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg


def run(args: argparse.Namespace) -> None:
    cfg = load_config(args)
    out: Path = args.out
    if args.command == "simulate":
        if args.steps < 0:
            raise ConfigError("--steps must be non-negative")
        out.mkdir(parents=True, exist_ok=True)
        path = out / "trajectory.csv"
        pipeline.simulate_trajectory(cfg, args.steps, path)
        print(path)
    elif args.command == "collect":
        for path in pipeline.collect(cfg, out):
            print(path)
    elif args.command == "train":
        for path in pipeline.train(cfg, out):
            print(path)
    elif args.command == "evaluate":
        pipeline.evaluate(cfg, out)
        print((out / "reports" / "comparison.txt").read_text(), end="")
    elif args.command == "pipeline":
        pipeline.run_pipeline(cfg, out)
        print((out / "reports" / "comparison.txt").read_text(), end="")


def _classify(exc: BaseException) -> int:
    if isinstance(exc, pipeline.StageError):
        return _classify(exc.cause)
    if isinstance(exc, AssertionError):
        return EXIT_INVARIANT
    if isinstance(exc, (ConfigError, DatasetFormatError, SafetyError, ModbusError, OSError, ValueError)):
        return EXIT_DATA
    return EXIT_INVARIANT


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        run(args)
    except Exception as exc:  # noqa: BLE001 - mapped to an exit code
        code = _classify(exc)
        print(f"tankids: {exc}", file=sys.stderr)
        if code == EXIT_INVARIANT:
            log.debug("invariant violation", exc_info=True)
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
