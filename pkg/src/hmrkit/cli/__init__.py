"""Command line entry point: ``hmrkit {train,eval,export,gen-data,ablate}``.

Failures print one line ``hmrkit: error code=<CODE> message=<text>`` to
stderr and exit with the code's status:

=================  ====
USAGE              2
CONFIG_ERROR       3
CHECKPOINT_ERROR   4
IO_ERROR           5
NAN_LOSS           6   (message carries ``step=<n>``)
CONTRACT_ERROR     7
INTERNAL_ERROR     1
=================  ====
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from ..meshtopo import MaskConfigError, TemplateError
from ..model import CheckpointError
from ..ndtensor import ConfigurationError, ContractError, DimensionError, OptimizerError
from .commands import (
    TrainingDivergedError,
    cmd_ablate,
    cmd_eval,
    cmd_export,
    cmd_gen_data,
    cmd_train,
    train,
)
from .config import PRECISIONS, RunConfig, config_to_text, desk_config, load_config, parse_config

EXIT_CODES = {
    "USAGE": 2,
    "CONFIG_ERROR": 3,
    "CHECKPOINT_ERROR": 4,
    "IO_ERROR": 5,
    "NAN_LOSS": 6,
    "CONTRACT_ERROR": 7,
    "INTERNAL_ERROR": 1,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _error_code(exc: BaseException) -> str:
    if isinstance(exc, UsageError):
        return "USAGE"
    if isinstance(exc, TrainingDivergedError):
        return "NAN_LOSS"
    if isinstance(exc, (ConfigurationError, MaskConfigError, TemplateError)):
        return "CONFIG_ERROR"
    if isinstance(exc, CheckpointError):
        return "CHECKPOINT_ERROR"
    if isinstance(exc, OSError):
        return "IO_ERROR"
    if isinstance(exc, (DimensionError, ContractError, OptimizerError)):
        return "CONTRACT_ERROR"
    return "INTERNAL_ERROR"


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run config file (key = value lines)")
    common.add_argument("--seed", type=int, help="dataset seed (export: sample seed)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--precision", choices=PRECISIONS)

    parser = _Parser(prog="hmrkit", description="Point-guided mesh reconstruction on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("train", parents=[common], help="train and write loss.csv + checkpoint.npz")
    ev = sub.add_parser("eval", parents=[common], help="write metrics.csv for a checkpoint")
    ev.add_argument("checkpoint")
    ev.add_argument("--oracle", action="store_true", help="score ground truth against itself")
    ex = sub.add_parser("export", parents=[common], help="OBJ mesh and PGM heatmaps for one sample")
    ex.add_argument("checkpoint")
    sub.add_parser("gen-data", parents=[common], help="dump the synthetic training set")
    sub.add_parser("ablate", parents=[common], help="sampling_mode x mask_mode matrix")
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, dataset=replace(config.dataset, seed=args.seed))
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    if args.precision is not None:
        config = replace(config, precision=args.precision)
    config.validate()
    return config


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train":
        result = cmd_train(resolve_config(args))
        print(f"final_loss={result.final_loss!r} checkpoint={result.checkpoint}")
    elif args.command == "eval":
        base = load_config(args.config) if args.config else None
        summary = cmd_eval(
            args.checkpoint, base, oracle=args.oracle, out=args.out, seed=args.seed, precision=args.precision
        )
        print(" ".join(f"{k}={v!r}" for k, v in summary.items()))
    elif args.command == "export":
        out = cmd_export(args.checkpoint, args.seed if args.seed is not None else 0, args.out or "export")
        print(f"exported={out}")
    elif args.command == "gen-data":
        print(f"written={cmd_gen_data(resolve_config(args))}")
    elif args.command == "ablate":
        for row in cmd_ablate(resolve_config(args)):
            print(" ".join(f"{k}={v}" for k, v in row.items()))
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except BaseException as exc:  # noqa: BLE001 - every failure maps to one line
        if isinstance(exc, KeyboardInterrupt):
            code, message = "INTERNAL_ERROR", "interrupted"
        else:
            code, message = _error_code(exc), str(exc)
        if isinstance(exc, TrainingDivergedError):
            message = f"step={exc.step} {message}"
        message = " ".join(message.split())
        print(f"hmrkit: error code={code} message={message}", file=sys.stderr)
        return EXIT_CODES[code]


__all__ = [
    "EXIT_CODES",
    "RunConfig",
    "build_parser",
    "config_to_text",
    "desk_config",
    "main",
    "parse_config",
    "resolve_config",
    "train",
]
