"""Application configuration: paths, environment switches and logging setup."""

import logging
import logging.config
import os
from pathlib import Path
from typing import Optional

import yaml

# Base directories
BASE_DIR = Path(__file__).resolve().parent.parent
CONFIG_DIR = BASE_DIR / "config"
TEMPLATES_DIR = BASE_DIR / "templates"

# Default files
LOGGING_CONFIG_FILE = CONFIG_DIR / "logging.yaml"
SCHEMA_FILE = CONFIG_DIR / "schema.yaml"
DEFAULT_RUN_FILE = CONFIG_DIR / "default_run.yaml"
CORRUPTIONS_FILE = CONFIG_DIR / "corruptions.yaml"

BLAS_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")


def log_dir() -> Path:
    return Path(os.environ.get("VPA_LOG_DIR", BASE_DIR / "logs"))


def strict_mode() -> bool:
    """True when VPA_STRICT=1 asks for sequential, bit-exact execution."""
    return os.environ.get("VPA_STRICT", "0") == "1"


def worker_count() -> int:
    """Worker pool size: 1 in strict mode, else VPA_THREADS or the CPU count."""
    if strict_mode():
        return 1
    value = os.environ.get("VPA_THREADS")
    if value:
        try:
            return max(1, int(value))
        except ValueError:
            logging.getLogger(__name__).warning(f"Ignoring non-integer VPA_THREADS={value!r}")
    return os.cpu_count() or 1


def apply_strict_threading() -> None:
    """Pin BLAS to one thread in strict mode; must run before numpy is imported."""
    if strict_mode():
        for var in BLAS_THREAD_VARS:
            os.environ[var] = "1"


def setup_logging(level: Optional[str] = None, config_path: Optional[Path] = None) -> None:
    """Configure logging from ``config/logging.yaml``.

    Handler file names are placed under the log directory. Falls back to
    ``logging.basicConfig`` when the file is missing.
    """
    path = Path(config_path or LOGGING_CONFIG_FILE)
    if path.exists():
        with open(path, "r", encoding="utf-8") as f:
            logging_config = yaml.safe_load(f)
        directory = log_dir()
        directory.mkdir(parents=True, exist_ok=True)
        for handler in logging_config.get("handlers", {}).values():
            if "filename" in handler:
                handler["filename"] = str(directory / Path(handler["filename"]).name)
        if level:
            logging_config["handlers"]["console"]["level"] = level.upper()
        logging.config.dictConfig(logging_config)
    else:
        # Fallback logging configuration
        logging.basicConfig(
            level=(level or "INFO").upper(),
            format="%(asctime)s - %(levelname)s - %(message)s",
        )
