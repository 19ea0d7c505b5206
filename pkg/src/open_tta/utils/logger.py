import logging
import os
from typing import Optional

_LEVEL_MAP = {
    "CRITICAL": logging.CRITICAL,
    "ERROR": logging.ERROR,
    "WARNING": logging.WARNING,
    "INFO": logging.INFO,
    "DEBUG": logging.DEBUG,
}

_FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"
_ROOT = "open_tta"


def _resolve_level(level_name: Optional[str]) -> int:
    if not level_name:
        return logging.INFO
    return _LEVEL_MAP.get(level_name.upper(), logging.INFO)


def get_logger(name: str) -> logging.Logger:
    level = _resolve_level(os.getenv("APP_LOG_LEVEL", "INFO"))

    logger = logging.getLogger(name)
    logger.setLevel(level)

    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(_FORMAT))
        logger.addHandler(handler)
        # one handler per module logger; don't double-print through the package logger
        logger.propagate = False
        # file handlers are attached to the package logger and mirrored here
        for fh in logging.getLogger(_ROOT).handlers:
            logger.addHandler(fh)

    return logger


def add_file_handler(path: str) -> logging.Handler:
    """Mirror every open_tta logger into `path` until `remove_file_handler` is called."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    fh = logging.FileHandler(path, encoding="utf-8")
    fh.setFormatter(logging.Formatter(_FORMAT))
    logging.getLogger(_ROOT).addHandler(fh)
    for name, lg in logging.Logger.manager.loggerDict.items():
        if isinstance(lg, logging.Logger) and name.startswith(_ROOT + "."):
            lg.addHandler(fh)
    return fh


def remove_file_handler(fh: logging.Handler) -> None:
    logging.getLogger(_ROOT).removeHandler(fh)
    for name, lg in logging.Logger.manager.loggerDict.items():
        if isinstance(lg, logging.Logger) and name.startswith(_ROOT + "."):
            lg.removeHandler(fh)
    fh.close()
