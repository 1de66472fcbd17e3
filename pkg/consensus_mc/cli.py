"""Command-line interface for consensus Monte Carlo experiments."""

from __future__ import annotations

import argparse
from collections.abc import Callable, Sequence
import logging
from pathlib import Path

from .config import ExperimentConfig, load_config
from .coordinator import ExperimentCoordinator, validate_experiment
from .exceptions import ConfigError, ConsensusError, StageError

_LOGGER = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG_ERROR = 2
EXIT_RUNTIME_ERROR = 3


def _add_common(parser: argparse.ArgumentParser, suppress: bool) -> None:
    """Global flags, accepted before or after the subcommand."""
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="experiment config (.toml or .json)")
    parser.add_argument("--seed", type=int, default=default, help="master seed override")
    parser.add_argument("--out", type=Path, default=default, help="output directory override")
    parser.add_argument("--threads", type=int, default=default, help="sampler threads (0 = all cores)")
    parser.add_argument(
        "--force", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="replace an existing experiment directory",
    )
    parser.add_argument(
        "--dry-run", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="print the stage plan without writing anything",
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=argparse.SUPPRESS if suppress else 0,
        help="debug logging",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="consensus-mc",
        description="Data-parallel MCMC with variationally optimized aggregation.",
    )
    _add_common(parser, suppress=False)
    commands = parser.add_subparsers(dest="command", required=True)

    sample = commands.add_parser("sample", help="draw serial or parallel subposterior samples")
    _add_common(sample, suppress=True)
    which = sample.add_mutually_exclusive_group(required=True)
    which.add_argument("--serial", action="store_true", help="full-data reference chain")
    which.add_argument("--parallel", action="store_true", help="K partition chains per K in the sweep")

    for name, text in (
        ("optimize", "fit uniform, Gaussian and variational weights"),
        ("aggregate", "combine partition draws with every weight set"),
        ("evaluate", "score aggregated draws against the serial reference"),
        ("pipeline", "run every stage into a fresh output directory"),
    ):
        _add_common(commands.add_parser(name, help=text), suppress=True)

    validate = commands.add_parser("validate", help="re-check a finished experiment directory")
    _add_common(validate, suppress=True)
    validate.add_argument("directory", type=Path, nargs="?", help="experiment directory")
    return parser


def _load(args: argparse.Namespace) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config is required")
    return load_config(args.config).with_overrides(seed=args.seed, out=args.out, threads=args.threads)


def _coordinator(args: argparse.Namespace) -> ExperimentCoordinator:
    return ExperimentCoordinator(_load(args), force=args.force)


def _print_plan(lines: Sequence[str]) -> None:
    for line in lines:
        print(line)


def cmd_sample(args: argparse.Namespace) -> int:
    coordinator = _coordinator(args)
    if args.dry_run:
        _print_plan([line for line in coordinator.plan() if line.startswith("serial" if args.serial else "sample")])
        return EXIT_OK
    coordinator.out.mkdir(parents=True, exist_ok=True)
    if args.serial:
        coordinator.sample_serial()
    else:
        for k in coordinator.config.k_sweep:
            coordinator.sample_parallel(k)
    return EXIT_OK


def cmd_optimize(args: argparse.Namespace) -> int:
    coordinator = _coordinator(args)
    if args.dry_run:
        _print_plan([line for line in coordinator.plan() if line.startswith("optimize")])
        return EXIT_OK
    for k in coordinator.config.k_sweep:
        coordinator.fit_weights(k)
    return EXIT_OK


def cmd_aggregate(args: argparse.Namespace) -> int:
    coordinator = _coordinator(args)
    if args.dry_run:
        _print_plan([line for line in coordinator.plan() if line.startswith("aggregate")])
        return EXIT_OK
    for k in coordinator.config.k_sweep:
        coordinator.aggregate(k)
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    coordinator = _coordinator(args)
    if args.dry_run:
        _print_plan([line for line in coordinator.plan() if line.startswith("evaluate")])
        return EXIT_OK
    coordinator.evaluate_all()
    return EXIT_OK


def cmd_pipeline(args: argparse.Namespace) -> int:
    coordinator = _coordinator(args)
    if args.dry_run:
        _print_plan(coordinator.plan())
        return EXIT_OK
    coordinator.run()
    _LOGGER.info("Experiment written to %s", coordinator.out)
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    directory = args.directory or args.out
    if directory is None:
        directory = _load(args).out
    problems = validate_experiment(directory)
    for problem in problems:
        print(problem)
    if problems:
        return EXIT_RUNTIME_ERROR
    print(f"{directory}: ok")
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace], int]] = {
    "sample": cmd_sample,
    "optimize": cmd_optimize,
    "aggregate": cmd_aggregate,
    "evaluate": cmd_evaluate,
    "pipeline": cmd_pipeline,
    "validate": cmd_validate,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        _LOGGER.error("%s", err)
        return EXIT_CONFIG_ERROR
    except StageError as err:
        _LOGGER.error("%s", err)
        return EXIT_CONFIG_ERROR if isinstance(err.cause, ConfigError) else EXIT_RUNTIME_ERROR
    except ConsensusError as err:
        _LOGGER.error("%s", err)
        return EXIT_RUNTIME_ERROR
    except Exception:
        _LOGGER.exception("Unexpected error")
        return EXIT_RUNTIME_ERROR
