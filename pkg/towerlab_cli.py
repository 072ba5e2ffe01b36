import argparse
import json
import logging
import sys

from config_manager import ConfigError
from experiment_runner import (EXIT_CONFIG, EXIT_INTERNAL, OUTPUT_ENV, StageError, run_experiment, sweep,
                               verify_suite, VerifySuite)

# Set up logging
logging.basicConfig(level=logging.INFO, format='%(asctime)s - %(levelname)s - %(message)s')
logger = logging.getLogger(__name__)


def parse_args(argv):
    """Parse the command line."""
    parser = argparse.ArgumentParser(
        prog='towerlab',
        description='Quenched decay of correlations on random Young towers.',
        epilog=f'Outputs go under ${OUTPUT_ENV} (default ./towerlab-runs).')
    commands = parser.add_subparsers(dest='command', required=True)

    run = commands.add_parser('run', help='Run the full experiment pipeline')
    run.add_argument('config', help='Path to a key = value configuration file')

    verify = commands.add_parser('verify', help='Run the named acceptance checks')
    verify.add_argument('config', help='Path to a key = value configuration file')
    verify.add_argument('--only', action='append', choices=VerifySuite.CHECKS, metavar='CHECK',
                        help=f'Run only this check (repeatable): {", ".join(VerifySuite.CHECKS)}')

    sweep_cmd = commands.add_parser('sweep', help='One run per value of a configuration key')
    sweep_cmd.add_argument('config', help='Path to a key = value configuration file')
    sweep_cmd.add_argument('--param', required=True, help='Configuration key to vary')
    sweep_cmd.add_argument('--values', required=True, help='Comma-separated values')
    return parser.parse_args(argv)


def main(argv=None) -> int:
    """
    Entry point of the towerlab command.

    Returns:
    - int: 0 pass, 1 check failure, 2 configuration error, 3 internal abort
    """
    if argv is None:
        argv = sys.argv[1:]
    args = parse_args(argv)
    try:
        if args.command == 'run':
            manifest = run_experiment(args.config)
            print(manifest.run_dir)
            return manifest.exit_code
        if args.command == 'verify':
            report = verify_suite(args.config, args.only)
            print(json.dumps(report.as_dict(), indent=2, sort_keys=True))
            return report.exit_code
        values = [v for v in args.values.split(',') if v.strip()]
        if not values:
            raise ConfigError("--values needs at least one value")
        path, code = sweep(args.config, args.param, values)
        print(path)
        return code
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        return EXIT_CONFIG
    except StageError as e:
        logger.error(f"{e}")
        return EXIT_INTERNAL
    except Exception as e:
        logger.exception(f"Internal error: {e}")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
