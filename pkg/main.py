import argparse
import os
import sys
import time

from logging_config import setup_logger

from src.pipeline.commands import COMMANDS
from src.pipeline.run_config import ConfigError, load_run_config


LOGGER = setup_logger()

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _ArgumentParser(prog="primcount", description="Functional primitive counting pipeline")
    subparsers = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)
    for name in COMMANDS:
        sub = subparsers.add_parser(name)
        sub.add_argument("--config", help="run configuration JSON; defaults apply without it")
        sub.add_argument("--seed", type=int, help="overrides the config seed")
        sub.add_argument("--out", help="overrides paths.output_dir")
        if name == "train":
            sub.add_argument("--folds", type=int, help="number of ensemble members")
        if name == "stream":
            sub.add_argument("--speed", type=float, default=1.0, help="replay clock multiplier, inf for unthrottled")
    return parser


def run(command: str, args: list) -> int:
    """
    Run one pipeline command.

    Returns:
        int: 0 on success, 1 on a runtime failure, 2 on a usage or config error.
    """
    start_time = time.time()
    try:
        namespace = build_parser().parse_args([command, *args])
        config = load_run_config(namespace.config).with_overrides(
            seed=namespace.seed,
            output_dir=namespace.out,
            n_folds=getattr(namespace, "folds", None),
        )
        config.validate_paths(namespace.command)
    except ConfigError as e:
        LOGGER.error(f"Usage or configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    LOGGER.info(f"Running '{namespace.command}' with output dir '{config.output_dir}'")
    try:
        os.makedirs(config.output_dir, exist_ok=True)
        COMMANDS[namespace.command](config, namespace)
    except ConfigError as e:
        LOGGER.error(f"Configuration error: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        LOGGER.error(f"Command '{namespace.command}' failed: {e}", exc_info=True)
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    LOGGER.info(
        f"Command '{namespace.command}' completed. Time taken: {time.time() - start_time:.2f} s"
    )
    return EXIT_OK


if __name__ == "__main__":
    LOGGER.info("===================================")
    LOGGER.info("Starting main.py!")
    LOGGER.info("===================================")
    LOGGER.info(f"Current working directory: '{os.getcwd()}'")
    if len(sys.argv) < 2:
        build_parser().print_help(sys.stderr)
        sys.exit(EXIT_USAGE)
    sys.exit(run(sys.argv[1], sys.argv[2:]))
