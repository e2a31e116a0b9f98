import json
import logging
import os
from pathlib import Path
from typing import Optional

import psutil
from dotenv import load_dotenv
from pydantic import ValidationError

from app.core.errors import ConfigError
from app.db.models import ExperimentConfig

logger = logging.getLogger(__name__)

# Load .env from project root, then the current working directory
env_locations = [
    Path(__file__).resolve().parent.parent.parent / ".env",  # app/core/config.py -> .env
    Path.cwd() / ".env",
]

for env_path in env_locations:
    if env_path.exists():
        load_dotenv(dotenv_path=env_path, override=False)
        break


def _default_workers() -> int:
    cores = psutil.cpu_count(logical=False) or psutil.cpu_count() or 1
    return max(1, int(cores))


class Settings:
    """Process-level settings loaded from environment variables"""

    # Debug mode
    DEBUG = os.getenv("DPSIM_DEBUG", "false").lower() == "true"
    LOG_LEVEL = os.getenv("DPSIM_LOG_LEVEL", "DEBUG" if DEBUG else "INFO").upper()

    # Output directory override (used only when --out is not given)
    OUTPUT_DIR = os.getenv("DPSIM_OUTPUT_DIR", "")

    # Parallel rank evaluation
    WORKERS = int(os.getenv("DPSIM_WORKERS", str(_default_workers())))

    # Oracle comparison
    DEFAULT_TOLERANCE = float(os.getenv("DPSIM_DEFAULT_TOLERANCE", "1e-9"))

    def validate(self):
        """Validate settings values"""
        if self.WORKERS < 1:
            raise ConfigError(f"DPSIM_WORKERS must be >= 1, got {self.WORKERS}")
        if self.DEFAULT_TOLERANCE < 0:
            raise ConfigError(f"DPSIM_DEFAULT_TOLERANCE must be >= 0, got {self.DEFAULT_TOLERANCE}")
        if logging.getLevelName(self.LOG_LEVEL) == f"Level {self.LOG_LEVEL}":
            raise ConfigError(f"Unknown DPSIM_LOG_LEVEL: {self.LOG_LEVEL}")
        return True

    def resolve_output_dir(self, cli_value: Optional[str], config_value: str) -> Path:
        """--out beats DPSIM_OUTPUT_DIR, which beats the config file's output_dir"""
        if cli_value:
            return Path(cli_value)
        if self.OUTPUT_DIR:
            return Path(self.OUTPUT_DIR)
        return Path(config_value)


settings = Settings()


def load_experiment_config(path, seed: Optional[int] = None) -> ExperimentConfig:
    """Read and strictly validate an experiment config document"""
    try:
        raw = Path(path).read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e

    try:
        document = json.loads(raw)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}") from e

    if not isinstance(document, dict):
        raise ConfigError(f"Config {path} must be a JSON object")

    if seed is not None:
        document.setdefault("run", {})
        if isinstance(document["run"], dict):
            document["run"]["seed"] = seed

    try:
        config = ExperimentConfig.model_validate(document)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {e}") from e

    logger.info(f"✓ Config loaded: {path} (label={config.label!r}, seed={config.run.seed})")
    return config
