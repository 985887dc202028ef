import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from cbf_integrator import CFLError
from cbf_pipeline import run_command
from output_writer import OutputError
from run_config import EXPERIMENTS, ConfigError, load_config

EXIT_OK = 0
EXIT_REPORT_FAILED = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def build_parser():
    parser = argparse.ArgumentParser(prog="cbf", description="CBF pseudo-spectral experiments")
    parser.add_argument("command", choices=EXPERIMENTS, help="experiment to run")
    parser.add_argument("--config", required=True, help="path to the run configuration")
    parser.add_argument("--seed", type=int, default=None, help="override the configured seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    parser.add_argument("--dry-run", action="store_true", help="validate the configuration and exit")
    parser.add_argument("--progress", action="store_true", help="show progress bars")
    return parser


def thread_count():
    """Worker threads from CBF_THREADS (default 1)."""
    raw = os.getenv("CBF_THREADS", "1")
    try:
        count = int(raw)
    except ValueError:
        raise ConfigError(f"CBF_THREADS must be an integer, got {raw!r}") from None
    if count < 1:
        raise ConfigError(f"CBF_THREADS must be >= 1, got {count}")
    return count


def main(argv=None):
    # Load environment variables
    load_dotenv()
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config).with_overrides(args.command, args.seed, args.out)
        n_jobs = thread_count()
    except ConfigError as e:
        print(f"Configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"Cannot read configuration: {e}", file=sys.stderr)
        return EXIT_CONFIG

    if args.dry_run:
        print(f"Configuration {args.config} is valid (experiment '{config.experiment.name}')")
        return EXIT_OK

    try:
        status, _ = run_command(config, n_jobs=n_jobs, progress=args.progress)
    except (OutputError, CFLError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except (FloatingPointError, OverflowError) as e:
        print(f"Numerical failure: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as e:
        print(f"Invalid input: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_REPORT_FAILED if status else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
