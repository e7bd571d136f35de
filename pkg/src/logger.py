import logging
import os
from pythonjsonlogger import jsonlogger

LOG_LEVEL_VARIABLE = "ZUBOV_LOG"


def log_level() -> int:
    level = logging.getLevelName(os.environ.get(LOG_LEVEL_VARIABLE, "INFO").upper())
    return level if isinstance(level, int) else logging.INFO


def set_up_logging(name: str):
    logger = logging.getLogger(name)
    logger.setLevel(log_level())

    # one JSON line per record, stack traces included, so runs can be grepped and parsed later
    if not logger.handlers:
        logHandler = logging.StreamHandler()
        formatter = jsonlogger.JsonFormatter("%(asctime)s %(levelname)s %(name)s %(message)s")
        logHandler.setFormatter(formatter)
        logger.addHandler(logHandler)

    return logger
