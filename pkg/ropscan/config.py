import os
import platform
import sys
from pathlib import Path

import numpy as np
import yaml
from dotenv import load_dotenv
from loguru import logger
from pydantic import BaseModel

from ropscan import __version__

load_dotenv()

DEFAULT_DB_URL = "sqlite:///./ropscan.db"
LOG_FORMAT = "<green>{time:HH:mm:ss}</green> | <level>{level: <7}</level> | {name}:{function} - {message}"


class Settings(BaseModel):
    log_level: str = "INFO"
    db_url: str = DEFAULT_DB_URL
    ledger: bool = True


def get_settings() -> Settings:
    return Settings(
        log_level=os.getenv("ROPSCAN_LOG", "INFO").upper(),
        db_url=os.getenv("ROPSCAN_DB_URL", DEFAULT_DB_URL),
        ledger=os.getenv("ROPSCAN_LEDGER", "1") != "0",
    )


def configure_logging(level: str | None = None) -> None:
    logger.remove()
    logger.add(sys.stderr, level=(level or get_settings().log_level), format=LOG_FORMAT)


def load_config_file(path: str | Path) -> dict:
    """YAML mapping of {subcommand: {option: value}}."""
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ValueError(f"{path}: {e}") from e
    if not isinstance(data, dict) or not all(isinstance(v, dict) for v in data.values()):
        raise ValueError(f"{path}: expected a mapping of subcommand -> options")
    return {str(k): {str(o).replace("-", "_"): v for o, v in opts.items()} for k, opts in data.items()}


def versions() -> dict[str, str]:
    return {"python": platform.python_version(), "numpy": np.__version__, "ropscan": __version__}
