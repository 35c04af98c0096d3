"""
Environment-driven settings and logging setup for the GGCF tooling.

Values come from the process environment, optionally seeded from a ``.env``
file in the working directory.
"""

import hashlib
import json
import os
import sys
from pathlib import Path
from typing import Any, Dict

from dotenv import load_dotenv
from loguru import logger

load_dotenv()

OUTPUT_DIR_ENV = "GGCF_OUTPUT_DIR"
LOG_DIR_ENV = "GGCF_LOG_DIR"
LOG_LEVEL_ENV = "GGCF_LOG_LEVEL"

DEFAULT_OUTPUT_DIR = "output"
DEFAULT_LOG_DIR = "logs"


def default_output_dir() -> Path:
    """Output directory from GGCF_OUTPUT_DIR, falling back to ./output."""
    return Path(os.getenv(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR)


def configure_logging(level: str = None, log_dir: str = None, file_logging: bool = True) -> None:
    """Install the stderr sink and the daily-rotated file sink.

    Only the CLI entry point calls this; library modules log through the
    shared loguru logger and never touch sinks.
    """
    level = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").upper()
    log_dir = log_dir or os.getenv(LOG_DIR_ENV) or DEFAULT_LOG_DIR

    logger.remove()
    logger.add(
        sys.stderr,
        format="<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | <cyan>{name}</cyan>:<cyan>{function}</cyan>:<cyan>{line}</cyan> - <level>{message}</level>",
        level=level,
    )
    if file_logging:
        logger.add(
            str(Path(log_dir) / "ggcf_{time:YYYY-MM-DD}.log"),
            rotation="1 day",
            retention="30 days",
            level="DEBUG",
            format="{time:YYYY-MM-DD HH:mm:ss.SSS} | {level: <8} | {name}:{function}:{line} - {message} | {extra}",
        )


def stable_hash(payload: Dict[str, Any], length: int = 12) -> str:
    """Short SHA-256 digest of a JSON-serialisable mapping (key order ignored)."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:length]
