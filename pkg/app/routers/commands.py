"""
Command-line router: parses flags, builds settings and dispatches subcommands to
the pipeline service. Domain errors become exit codes here and nowhere else.
"""
import argparse
import json
from pathlib import Path
from typing import List, Optional

from app.core.config import load_settings
from app.core.exceptions import MoEPipelineError, UsageError
from app.core.logging_config import get_logger, setup_logging
from app.services.pipeline_service import SUBCOMMANDS, PipelineService

logger = get_logger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1


class CommandParser(argparse.ArgumentParser):
    """Argument errors raise UsageError (exit code 1)"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> CommandParser:
    parser = CommandParser(
        prog="sepsis-moe",
        description="Offline RL for sepsis treatment: kernel and DQN experts mixed by a WDR-trained gate",
    )
    parser.add_argument("command", choices=list(SUBCOMMANDS) + ["all"], help="subcommand to run")
    parser.add_argument("--config", type=Path, help="JSON config file")
    parser.add_argument("--seed", type=int, help="global seed")
    parser.add_argument("--scale", choices=["desk", "paper"], help="hyperparameter preset")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--cohort", type=Path, help="cohort CSV to use instead of a simulated one")
    parser.add_argument("--agreement", choices=["argmax", "tv"], help="policy agreement measure for the report")
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")
    return parser


def settings_overrides(args: argparse.Namespace) -> dict:
    return {
        "SEED": args.seed,
        "SCALE": args.scale,
        "OUTPUT_DIR": args.out,
        "COHORT_PATH": args.cohort,
        "REPORT_AGREEMENT": args.agreement,
        "LOG_LEVEL": args.log_level,
    }


def run_command(argv: Optional[List[str]] = None) -> int:
    setup_logging()
    try:
        args = build_parser().parse_args(argv)
        settings = load_settings(args.config, settings_overrides(args))
        setup_logging(settings.LOG_LEVEL, settings.OUTPUT_DIR / "logs")
        logger.info(f"Settings: scale={settings.SCALE}, seed={settings.SEED}, config hash {settings.config_hash()[:12]}")

        result = PipelineService(settings).run(args.command)
        logger.info(f"'{args.command}' done: {json.dumps(result, sort_keys=True, default=str)[:2000]}")
        return EXIT_OK
    except MoEPipelineError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.error(f"Unexpected error: {str(e)}", exc_info=True)
        return EXIT_UNEXPECTED
