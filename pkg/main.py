#!/usr/bin/env python3
"""
Diffusion Quantization Pipeline

Main entry point for every stage of a quantization run: FP training,
serial latent generation, calibration, quantization-aware fine-tuning,
sampling, evaluation and the comparison experiments.

Usage:
    python main.py <command> [options] [key.path=value ...]

Examples:
    # Default workflow on config.yaml
    python main.py train-fp
    python main.py gen-dataset
    python main.py calibrate
    python main.py train-qat --mode s2p
    python main.py evaluate --mode s2p

    # Smaller run in another directory
    python main.py train-qat run.output_dir=./runs/small qat.iterations=200

    # Experiments and the summary report
    python main.py compare-pipelines experiments.seeds=[0,1]
    python main.py ablate
    python main.py report
"""

import argparse
import sys
import traceback
from pathlib import Path
from typing import Optional, Sequence

# Add project root to path
PROJECT_ROOT = Path(__file__).parent
sys.path.insert(0, str(PROJECT_ROOT))

from shared import RunConfig, print_banner

COMMANDS = (
    "train-fp",
    "gen-dataset",
    "calibrate",
    "train-qat",
    "sample",
    "evaluate",
    "compare-pipelines",
    "dataset-tradeoff",
    "ablate",
    "report",
)


def dispatch(
    command: str,
    config_path: Optional[str] = None,
    overrides: Sequence[str] = (),
    mode: Optional[str] = None,
    quiet: bool = False,
) -> int:
    """
    Run one command.

    Args:
        command: One of COMMANDS
        config_path: Config file (default: config.local.yaml or config.yaml)
        overrides: `key.path=value` strings applied over the file
        mode: Pipeline mode for train-qat / sample / evaluate
        quiet: Suppress progress output

    Returns:
        Process exit status: 0 on success, 1 on failure, 130 on interrupt
    """
    # Import here so `--help` stays fast
    from workflows import (
        AblationWorkflow,
        DatasetTradeoffWorkflow,
        PipelineComparisonWorkflow,
        QuantizationWorkflow,
        build_summary,
    )

    try:
        if command not in COMMANDS:
            raise ValueError(f"Unknown command {command!r}; expected one of {', '.join(COMMANDS)}")
        overrides = list(overrides) + (["run.verbose=false"] if quiet else [])
        config = RunConfig.load(config_path, overrides, verbose=not quiet)
        verbose = config.verbose

        print_banner(f"DIFFQUANT: {command.upper()}", verbose)

        if command == "report":
            output = build_summary(config.output_dir)
            if verbose:
                print(f"Summary: {output}")
            return 0

        experiments = {
            "compare-pipelines": PipelineComparisonWorkflow,
            "dataset-tradeoff": DatasetTradeoffWorkflow,
            "ablate": AblationWorkflow,
        }
        if command in experiments:
            result = experiments[command](config).run()
        else:
            result = QuantizationWorkflow(config).run(command=command, mode=mode)

        if verbose:
            print()
            print("=" * 60)
            print("COMMAND COMPLETE" if result.success else "COMMAND FINISHED WITH FAILURES")
            print("=" * 60)
            for path in result.output_files:
                print(f"Output: {path}")
            for error in result.errors:
                print(f"Failed step: {error}")
        return 0 if result.success else 1

    except KeyboardInterrupt:
        print("\n\nPipeline interrupted by user")
        return 130
    except Exception as e:
        print(f"\nError: {e}")
        if not quiet:
            traceback.print_exc()
        return 1


def parse_args(argv: Optional[Sequence[str]] = None):
    """Parse command line arguments."""
    parser = argparse.ArgumentParser(
        description="Diffusion Quantization Pipeline - FP training, S2P fine-tuning and evaluation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python main.py train-fp                              # Train FP model + feature extractor
  python main.py gen-dataset pipeline.num_conditions=500
  python main.py train-qat --mode parallel             # Baseline pipeline
  python main.py evaluate --mode s2p -q                # Quiet evaluation
  python main.py report                                # Markdown summary of all reports
        """
    )

    parser.add_argument(
        "command",
        choices=COMMANDS,
        help="Stage or experiment to run"
    )
    parser.add_argument(
        "overrides",
        nargs="*",
        metavar="KEY=VALUE",
        help="Config overrides such as qat.iterations=500"
    )

    # Config
    parser.add_argument(
        "-c", "--config",
        type=str,
        default=None,
        help="Path to config file (default: config.local.yaml or config.yaml)"
    )

    parser.add_argument(
        "--mode",
        choices=("serial", "parallel", "s2p", "serial_to_parallel"),
        default=None,
        help="Pipeline mode for train-qat, sample and evaluate (default: pipeline.mode)"
    )

    # Output
    parser.add_argument(
        "-q", "--quiet",
        action="store_true",
        help="Suppress progress output"
    )

    return parser.parse_args(argv)


def main():
    """Main entry point."""
    args = parse_args()
    sys.exit(dispatch(args.command, args.config, args.overrides, mode=args.mode, quiet=args.quiet))


if __name__ == "__main__":
    main()
