"""Logging configuration shared by the CLI and the HTTP app."""

import logging
from typing import Optional

from config import settings


def setup_logging(level: Optional[str] = None) -> None:
    """Configure the root logger once from settings."""
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format=settings.LOG_FORMAT,
    )
