#!/usr/bin/env python3
"""Command line interface for visual prompt adaptation experiments."""

import argparse
import logging
import sys
from pathlib import Path

from app.config import apply_strict_threading, setup_logging

# BLAS reads its thread settings when numpy is first imported
apply_strict_threading()

logger = logging.getLogger("app.cli")

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _add_run_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", "-c", help="Run config file, JSON or YAML (default: config/default_run.yaml)")
    parser.add_argument("--seed", type=int, help="Override the run seed")


def _add_adapt_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--checkpoint", required=True, help="Source checkpoint from train-source")
    parser.add_argument("--out", "-o", required=True, help="Output directory")
    parser.add_argument("--regime", choices=["bia", "sia", "pla"])
    parser.add_argument("--lifecycle", choices=["episodic", "continual"])
    parser.add_argument("--steps", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--prompt-kind", dest="prompt_kind", choices=["additive", "prependitive"])


def _grid_value(text: str):
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            continue
    return text


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="Test-time visual prompt adaptation")
    parser.add_argument("--log-level", default=None, help="Console log level (default from config/logging.yaml)")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train-source", help="Train and save the frozen source model")
    _add_run_options(train)
    train.add_argument("--out", "-o", required=True, help="Checkpoint path (.vpac)")

    adapt = sub.add_parser("adapt", help="Run source baseline and adaptation over the test stream")
    _add_run_options(adapt)
    _add_adapt_options(adapt)
    adapt.add_argument("--method", default="vpa", choices=["vpa", "tent-norm", "tent-cls", "tent-all"])

    ablate = sub.add_parser("ablate", help="Sweep one hyper-parameter as independent sessions")
    _add_run_options(ablate)
    _add_adapt_options(ablate)
    ablate.add_argument("--axis", required=True, choices=["steps", "tau", "prompt_size", "k", "augment", "lr"])
    ablate.add_argument("--grid", nargs="+", type=_grid_value, help="Grid values (default per axis)")
    ablate.add_argument("--record-to", dest="record_to",
                        help="Write a copy of the run config with the best value of a steps, tau or lr sweep")

    report = sub.add_parser("report", help="Consolidate run summaries into one comparison table")
    report.add_argument("run_dirs", nargs="+", help="Directories written by adapt")
    report.add_argument("--out", "-o", required=True, help="Output directory")
    return parser


def run(args: argparse.Namespace) -> int:
    from app.experiment import RECORDABLE_AXES, ExperimentRunner
    from app.run_config_loader import RunConfigError, RunConfigLoader
    from core.metrics_io import read_json

    if args.command == "report":
        report = ExperimentRunner.report(args.run_dirs, args.out)
        print(f"Report written to {args.out} ({len(report.rows)} rows, {len(report.skipped)} skipped)")
        return EXIT_OK

    overrides = {"seed": args.seed}
    if args.command in ("adapt", "ablate"):
        overrides.update({
            "regime": args.regime, "lifecycle": args.lifecycle, "steps": args.steps,
            "lr": args.lr, "tau": args.tau, "prompt_kind": args.prompt_kind,
        })
    loader = RunConfigLoader()
    runner = ExperimentRunner(loader.load(args.config, overrides), loader)

    if args.command == "train-source":
        result = runner.train_source(args.out)
        print(f"Checkpoint saved to {result['checkpoint']}")
        print(f"Clean test accuracy: {result['clean_accuracy']:.2f}%")
    elif args.command == "adapt":
        summary = runner.adapt(args.checkpoint, args.out, method=args.method)
        print(f"source_acc={summary['source_acc']:.2f} adapted_acc={summary['adapted_acc']:.2f} "
              f"delta={summary['delta']:+.2f}")
    else:
        if args.record_to and args.axis not in RECORDABLE_AXES:
            raise RunConfigError(f"--record-to supports the axes {sorted(RECORDABLE_AXES)}, not '{args.axis}'")
        rows = runner.ablate(args.checkpoint, args.axis, args.out, grid=args.grid)
        for row in rows:
            print(f"{row['axis']}={row['value']}: accuracy {row['accuracy']:.2f}% (delta {row['delta']:+.2f})")
        if args.record_to:
            selection = read_json(Path(args.out) / "selection.json")
            path = runner.record_selection(selection, args.config, args.record_to)
            print(f"Recorded {args.axis}={selection['value']} in {path}")
    return EXIT_OK


def main(argv=None) -> int:
    """Main CLI function."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)

    from app.run_config_loader import RunConfigError
    from core.adapt_engine import AdaptationConfigError, NumericalDivergenceError
    from core.container import ContainerError
    from core.data_corruptions import DataGenerationError
    from core.report import ReportError
    from core.tensor import NonFiniteError
    from core.trainer import SourceTrainingError
    from core.vit import ModelConfigurationError

    try:
        return run(args)
    except (RunConfigError, AdaptationConfigError, ModelConfigurationError, DataGenerationError, ReportError) as e:
        logger.error(f"Configuration error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalDivergenceError, SourceTrainingError, NonFiniteError) as e:
        logger.error(f"Numerical failure: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContainerError, OSError) as e:
        logger.error(f"I/O error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_IO
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
