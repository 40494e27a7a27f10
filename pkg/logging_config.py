import logging
import os
from logging.handlers import RotatingFileHandler


LOGGER_NAME = "PRIMCOUNT"


def setup_logger():
    # initialize logger
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(logging.DEBUG)

    if logger.hasHandlers():
        return logger

    file_level = os.environ.get("PRIMCOUNT_LOG_LEVEL", "DEBUG").upper()
    log_file = os.environ.get("PRIMCOUNT_LOG_FILE", f"{LOGGER_NAME}.log")

    # console stays at INFO, per-window chatter goes to the file only
    console_channel = logging.StreamHandler()
    console_channel.setLevel(logging.INFO)

    file_handler = RotatingFileHandler(
        log_file, mode="a", maxBytes=5 * 1024 * 1024, backupCount=3
    )
    file_handler.setLevel(file_level)

    # create formatter
    formatter = logging.Formatter(
        "%(asctime)s - %(filename)s - %(lineno)d - %(levelname)s - %(message)s"
    )
    console_channel.setFormatter(formatter)
    file_handler.setFormatter(formatter)

    # add handlers to logger
    logger.addHandler(console_channel)
    logger.addHandler(file_handler)

    return logger
