"""
Command line entry point.

    python -m app <command> [--preset NAME] [--config FILE] [--section.key VALUE ...]

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
"""
import argparse
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

from pydantic import ValidationError

from app.core.experiments import ablate, sweep
from app.core.trainer import dump_routes, evaluate, grad_check, load_or_generate, train
from app.models.config import SECTIONS, PRESETS, RunConfig, build_config, load_config_file
from app.models.models import Variant
from app.services.gcddata import load_dataset, save_dataset
from app.validators.errors import GcdValidationError, InfiniteDivergenceError, NumericFailure

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"


def _config_flags() -> argparse.ArgumentParser:
    """Parent parser with --preset, --config and one --section.key flag per config field."""
    parent = argparse.ArgumentParser(add_help=False)
    parent.add_argument("--preset", default=None, choices=sorted(PRESETS))
    parent.add_argument("--config", type=Path, default=None, help="key = value file")
    parent.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    group = parent.add_argument_group("config keys")
    for section in SECTIONS:
        section_model = RunConfig.model_fields[section].annotation
        for name in section_model.model_fields:
            key = f"{section}.{name}"
            group.add_argument(f"--{key}", dest=key, default=None, metavar="VALUE")
    return parent


def build_parser() -> argparse.ArgumentParser:
    parent = _config_flags()
    parser = argparse.ArgumentParser(prog="adaptgcd", description="Multi-expert adapter tuning for GCD")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", parents=[parent], help="write a synthetic .gcd dataset")
    gen.add_argument("--out", type=Path, required=True)

    train_cmd = commands.add_parser("train", parents=[parent], help="train and write reports + checkpoint")
    train_cmd.add_argument("--data", type=Path, default=None, help=".gcd file (default: synthesize)")

    evaluate_cmd = commands.add_parser("evaluate", parents=[parent], help="score a checkpoint")
    evaluate_cmd.add_argument("--checkpoint", type=Path, required=True, help="checkpoint stem")
    evaluate_cmd.add_argument("--data", type=Path, required=True)
    evaluate_cmd.add_argument("--out", type=Path, default=None)

    grad = commands.add_parser("grad-check", parents=[parent], help="finite-difference gradient check")
    grad.add_argument("--tolerance", type=float, default=1e-4)
    grad.add_argument("--step", type=float, default=1e-5)

    ablate_cmd = commands.add_parser("ablate", parents=[parent], help="run the ablation variants")
    ablate_cmd.add_argument("--variants", default=",".join(v.value for v in Variant))
    ablate_cmd.add_argument("--seeds", default="0")
    ablate_cmd.add_argument("--workers", type=int, default=1)

    dump = commands.add_parser("dump-routes", parents=[parent], help="dump pooled routes per sample")
    dump.add_argument("--checkpoint", type=Path, required=True)
    dump.add_argument("--data", type=Path, required=True)
    dump.add_argument("--out", type=Path, default=None)
    dump.add_argument("--features", action="store_true")
    dump.add_argument("--attention", action="store_true")

    sweep_cmd = commands.add_parser("sweep", parents=[parent], help="train once per value of one key")
    sweep_cmd.add_argument("--key", required=True)
    sweep_cmd.add_argument("--values", required=True, help="comma separated")
    sweep_cmd.add_argument("--workers", type=int, default=1)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """preset < --config file < --section.key flags."""
    preset = args.preset or ("tiny" if args.command == "grad-check" else "desk")
    overrides: Dict[str, Any] = {}
    if args.config is not None:
        overrides.update(load_config_file(args.config))
    for key, value in vars(args).items():
        if "." in key and value is not None:
            overrides[key] = value
    return build_config(preset, overrides)


def _output_dir(args: argparse.Namespace, config: RunConfig) -> Path:
    return Path(getattr(args, "out", None) or config.run.output_dir)


def cmd_gen_data(args, config: RunConfig) -> int:
    save_dataset(load_or_generate(config), args.out)
    return EXIT_OK


def cmd_train(args, config: RunConfig) -> int:
    split = load_dataset(args.data) if args.data else None
    outcome = train(config, split=split)
    logger.info("wrote %d steps of metrics and checkpoint to %s", outcome.steps, outcome.output_dir)
    return EXIT_OK


def cmd_evaluate(args, config: RunConfig) -> int:
    evaluate(args.checkpoint, load_dataset(args.data), _output_dir(args, config), expected=config)
    return EXIT_OK


def cmd_grad_check(args, config: RunConfig) -> int:
    report = grad_check(config, tolerance=args.tolerance, step=args.step, output_dir=_output_dir(args, config))
    if not report.passed:
        failed = [g.name for g in report.groups if g.status == "fail"]
        logger.error("grad-check failed for groups: %s", ", ".join(failed))
        return EXIT_NUMERIC
    logger.info("grad-check passed (tolerance %g)", args.tolerance)
    return EXIT_OK


def _split_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def cmd_ablate(args, config: RunConfig) -> int:
    try:
        variants = [Variant(name) for name in _split_list(args.variants)]
        seeds = [int(seed) for seed in _split_list(args.seeds)]
    except ValueError as e:
        raise GcdValidationError(f"bad --variants/--seeds: {e}") from e
    ablate(config, variants, seeds, workers=args.workers)
    return EXIT_OK


def cmd_dump_routes(args, config: RunConfig) -> int:
    dump_routes(args.checkpoint, load_dataset(args.data), _output_dir(args, config),
                features=args.features, attention=args.attention)
    return EXIT_OK


def cmd_sweep(args, config: RunConfig) -> int:
    sweep(config, args.key, _split_list(args.values), workers=args.workers)
    return EXIT_OK


COMMANDS: Dict[str, Callable[[argparse.Namespace, RunConfig], int]] = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "grad-check": cmd_grad_check,
    "ablate": cmd_ablate,
    "dump-routes": cmd_dump_routes,
    "sweep": cmd_sweep,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, force=True)
    try:
        config = resolve_config(args)
        return COMMANDS[args.command](args, config)
    except (GcdValidationError, ValidationError) as e:
        logger.error("validation error: %s", e)
        return EXIT_VALIDATION
    except (NumericFailure, InfiniteDivergenceError) as e:
        logger.error("numeric failure: %s", e)
        return EXIT_NUMERIC
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
