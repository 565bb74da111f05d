"""
facecloak - command-line entry point.

Usage: python -m facecloak.main <command> [--config FILE] [--seed N] ...
"""
import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

from facecloak import __version__
from facecloak.env import load_env

load_env()

from facecloak.commands import COMMANDS  # noqa: E402
from facecloak.commands.context import CommandContext  # noqa: E402
from facecloak.errors import FaceCloakError  # noqa: E402
from facecloak.utils.config_loader import load_config  # noqa: E402
from facecloak.utils.logger import close_file_handlers, setup_logger  # noqa: E402
from facecloak.utils.seeding import seed_everything  # noqa: E402

LOGGER_NAME = 'facecloak'
EXIT_FAILURE = 2
EXIT_UNEXPECTED = 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help="Experiment YAML (default: $FACECLOAK_CONFIG or ./config.yaml)")
    common.add_argument('--seed', type=int, help="Master seed; overrides the config file")
    common.add_argument('--log-level', default=os.getenv('LOG_LEVEL', 'info'), help="Log level")

    parser = argparse.ArgumentParser(
        prog="facecloak",
        description="Pose-invariant face privacy textures against retrieval by face recognition",
    )
    parser.add_argument('--version', action='version', version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest='command', required=True)
    for module in COMMANDS:
        sub = subparsers.add_parser(module.NAME, help=module.HELP, parents=[common])
        module.add_arguments(sub)
        sub.set_defaults(handler=module)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logger = setup_logger(LOGGER_NAME, args.log_level.upper())
    handler = args.handler
    try:
        config = load_config(args.config, args.seed)
        ctx = CommandContext.from_config(config)
        setup_logger(LOGGER_NAME, args.log_level.upper(), Path(config.output_dir) / "logs" / f"{args.command}.log")
        seed_everything(config.seed)
        logger.info(f"facecloak {__version__}: {args.command} (seed={config.seed}, output={config.output_dir})")
        handler.run(args, ctx)
        return 0
    except FaceCloakError as e:
        logger.error(f"❌ {args.command} failed: {e}")
        return EXIT_FAILURE
    except Exception as e:
        logger.exception(f"❌ Unexpected error in {args.command}: {e}")
        return EXIT_UNEXPECTED
    finally:
        close_file_handlers(LOGGER_NAME)


if __name__ == "__main__":
    sys.exit(main())
