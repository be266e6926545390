"""Environment-provided defaults (.env aware)."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from .errors import ConfigError

DEFAULT_OUT_DIR = Path("runs")
LOG_FORMATS = ("json", "text")


@dataclass(frozen=True)
class Settings:
    data_dir: Optional[Path]
    out_dir: Path
    log_level: str
    log_format: str


def load_settings(env_file: Optional[Path] = None) -> Settings:
    # Variables already exported in the shell win over the .env file.
    load_dotenv(dotenv_path=env_file, override=False)

    data_dir = os.getenv("RHOVAE_DATA_DIR")
    out_dir = os.getenv("RHOVAE_OUT_DIR") or str(DEFAULT_OUT_DIR)
    log_level = (os.getenv("RHOVAE_LOG_LEVEL") or "INFO").upper()
    log_format = (os.getenv("RHOVAE_LOG_FORMAT") or "json").lower()

    if not isinstance(logging.getLevelName(log_level), int):
        raise ConfigError("RHOVAE_LOG_LEVEL", f"unknown log level {log_level!r}")
    if log_format not in LOG_FORMATS:
        raise ConfigError("RHOVAE_LOG_FORMAT", f"expected one of {', '.join(LOG_FORMATS)}, got {log_format!r}")

    return Settings(
        data_dir=Path(data_dir) if data_dir else None,
        out_dir=Path(out_dir),
        log_level=log_level,
        log_format=log_format,
    )
