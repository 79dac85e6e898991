"""Library-wide logger.

Import it from any module:

    ```
    from ihpmp.log import logger

    logger.info("Sweeping 7 horizons")
    logger.warning("Sweep inconclusive")
    ```

Console output starts at INFO. Warnings and errors are also appended to `logs/ihpmp.log` at the
repository root, so a long probe run leaves a record of every fallback it took.
"""

import logging
import os
from logging.config import dictConfig
from pathlib import Path

DEFAULT_LOGFILE = Path(__file__).resolve().parent.parent / "logs" / "ihpmp.log"


def setup_logger(
    logfile: Path = DEFAULT_LOGFILE, console_level: str | None = None
) -> logging.Logger:
    """Configure the `ihpmp` logger with a console handler and a warning-level file handler.

    Args:
        logfile: Where WARNING and above are written.
        console_level: Level of the console handler. Falls back to the `IHPMP_LOG_LEVEL`
            environment variable and then to INFO.

    Returns:
        The configured `ihpmp` logger.
    """
    logfile.parent.mkdir(parents=True, exist_ok=True)
    console_level = console_level or os.environ.get("IHPMP_LOG_LEVEL", "INFO")

    dictConfig(
        {
            "version": 1,
            "disable_existing_loggers": False,
            "formatters": {
                "default": {
                    "format": "%(asctime)s - %(levelname)s - %(message)s",
                    "datefmt": "%Y-%m-%d %H:%M:%S",
                },
            },
            "handlers": {
                "console": {
                    "class": "logging.StreamHandler",
                    "formatter": "default",
                    "level": console_level,
                },
                "file": {
                    "class": "logging.FileHandler",
                    "filename": str(logfile),
                    "formatter": "default",
                    "level": "WARNING",
                },
            },
            "loggers": {
                "ihpmp": {
                    "handlers": ["console", "file"],
                    "level": "DEBUG",
                    "propagate": False,
                },
            },
        }
    )
    return logging.getLogger("ihpmp")


logger = setup_logger()
