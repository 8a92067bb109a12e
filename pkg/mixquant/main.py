"""
Main entry point: command-line dispatch for mixquant
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

import structlog

# Allow running as a script from a source checkout
sys.path.append(str(Path(__file__).parent.parent))

from mixquant.api import CommandsAPI, HealthAPI, format_table
from mixquant.core.config_parser import apply_overrides, load_config
from mixquant.core.errors import ConfigError, MixQuantError, ParseError
from mixquant.models.config import RunConfig

logger = structlog.get_logger(__name__)

VERBS = ('train', 'calibrate', 'quantize', 'eval', 'sensitivity', 'profile', 'report', 'ablation')
LOG_LEVEL_ENV = 'MIXQUANT_LOG_LEVEL'

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


def configure_logging(level: str = "INFO"):
    """Route structlog through stdlib logging to stderr"""
    numeric = logging.getLevelName(level.upper())
    if not isinstance(numeric, int):
        numeric = logging.INFO
    logging.basicConfig(format="%(message)s", stream=sys.stderr, level=numeric, force=True)
    structlog.configure(
        processors=[
            structlog.stdlib.filter_by_level,
            structlog.stdlib.add_logger_name,
            structlog.stdlib.add_log_level,
            structlog.processors.TimeStamper(fmt="%H:%M:%S"),
            structlog.dev.ConsoleRenderer(colors=False),
        ],
        logger_factory=structlog.stdlib.LoggerFactory(),
        wrapper_class=structlog.stdlib.BoundLogger,
        cache_logger_on_first_use=False,
    )


class UsageError(Exception):
    """Bad command line"""


class ArgumentParser(argparse.ArgumentParser):
    """argparse that raises instead of exiting, so dispatch owns the exit code"""

    def error(self, message):
        raise UsageError(message)


def build_parser() -> ArgumentParser:
    common = ArgumentParser(add_help=False)
    common.add_argument('--config', help='Run configuration file')
    common.add_argument('--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
                        help='Override a config value, e.g. quant.weight_bits=4 (repeatable)')
    common.add_argument('--out', help='Output directory (overrides output.directory)')
    common.add_argument('--seed', type=int, help='Seed for training and data (overrides train.seed and data.seed)')
    common.add_argument('--threads', type=int,
                        help='Worker threads; 1 is the bit-reproducible reference, 0 uses every physical core')
    common.add_argument('--log-level', default=None, help=f"Log level (default ${LOG_LEVEL_ENV} or INFO)")

    parser = ArgumentParser(prog='mixquant', description='Quantization toolkit for MLP-like vision models')
    verbs = parser.add_subparsers(dest='verb', metavar='VERB', parser_class=ArgumentParser)
    verbs.add_parser('train', parents=[common], help='Train from scratch or QAT fine-tune')
    verbs.add_parser('calibrate', parents=[common], help='Calibrate post-training quantization ranges')
    verbs.add_parser('quantize', parents=[common], help='Post-training quantize and evaluate')
    verbs.add_parser('eval', parents=[common], help='Evaluate the full-precision checkpoint')
    verbs.add_parser('sensitivity', parents=[common], help='Hessian-trace sensitivity per block')
    verbs.add_parser('profile', parents=[common], help='Activation range profile per layer')
    report = verbs.add_parser('report', parents=[common], help='Merge metric files into one table')
    report.add_argument('inputs', nargs='*', help='Metric CSV/JSON files')
    verbs.add_parser('ablation', parents=[common], help='ConvMixer percentile x asymmetric x PACT grid')
    return parser


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    apply_overrides(config, args.overrides)
    if args.out:
        config.output.directory = args.out
    if args.seed is not None:
        config.train.seed = args.seed
        config.data.seed = args.seed
    if args.threads is not None:
        config.output.threads = args.threads
    config.output.threads = HealthAPI.resolve_threads(config.output.threads)
    return config.validate()


def dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one command; returns 0 on success, 1 on usage error, 2 on runtime error"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.verb is None:
            raise UsageError("a verb is required: " + ", ".join(VERBS))
        if args.verb != 'report' and not args.config:
            raise UsageError(f"{args.verb} needs --config")
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"mixquant: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:
        return int(e.code or 0)

    configure_logging(args.log_level or os.environ.get(LOG_LEVEL_ENV, 'INFO'))

    try:
        config = resolve_config(args)
    except ParseError as e:
        logger.error("Invalid config file", path=args.config, error=str(e))
        return EXIT_RUNTIME
    except ConfigError as e:
        parser.print_usage(sys.stderr)
        logger.error("Invalid configuration", error=str(e))
        return EXIT_USAGE
    except (MixQuantError, OSError) as e:
        logger.error("Failed to load configuration", error=str(e))
        return EXIT_RUNTIME

    print(config.to_text())
    environment = HealthAPI().environment_status()
    logger.info("Environment", **environment.get('system', {}))

    api = CommandsAPI(config)
    logger.info("Command started", verb=args.verb, out=str(api.out_dir), threads=config.output.threads)
    if args.verb == 'report':
        result = api.report(args.inputs)
        if result['status'] == EXIT_OK:
            print(result['table'])
    else:
        result = getattr(api, args.verb)()

    if result['status'] != EXIT_OK:
        return EXIT_RUNTIME
    logger.info(f"✅ {args.verb} finished", artifacts=result.get('artifacts', []))
    return EXIT_OK


def main():
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
