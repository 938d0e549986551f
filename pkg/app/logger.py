"""Logging setup for aesfusor."""

import json
import logging
import sys


class JsonLineFormatter(logging.Formatter):
    """Render each record as one JSON object per line."""

    def format(self, record: logging.LogRecord) -> str:
        payload = {
            "ts": self.formatTime(record, "%Y-%m-%dT%H:%M:%S"),
            "level": record.levelname,
            "logger": record.name,
            "module": record.module,
            "line": record.lineno,
            "msg": record.getMessage(),
        }
        if record.exc_info:
            payload["exc"] = self.formatException(record.exc_info)
        return json.dumps(payload, ensure_ascii=False)


def setup_logger(name="aesfusor", level=logging.INFO, json_lines=False):
    """Set up logger with console output.

    Args:
        name: Logger name
        level: Logging level
        json_lines: Emit line-delimited JSON instead of the text format

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Remove existing handlers to avoid duplicates
    logger.handlers = []
    logger.propagate = False

    # stderr keeps stdout free for command results
    handler = logging.StreamHandler(sys.stderr)
    handler.setLevel(level)

    if json_lines:
        formatter = JsonLineFormatter()
    else:
        formatter = logging.Formatter(
            '[%(asctime)s] %(levelname)-8s %(name)s.%(module)s:%(lineno)d - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
    handler.setFormatter(formatter)
    logger.addHandler(handler)

    return logger


# Create default logger
logger = setup_logger()
