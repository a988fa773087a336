"""
Configuration management for Impatient Networks.

Process-wide settings (logging, defaults) come from environment variables via
Pydantic settings. Experiment settings come from a YAML run configuration that
is validated into a RunConfig; command-line flags override file values.
"""

from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from dotenv import load_dotenv
from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings

from src.core.exceptions import ConfigurationError
from src.models.schemas import RunConfig

# Load environment variables
load_dotenv()


class Settings(BaseSettings):
    """Application settings with environment variable loading."""

    APPLICATION_NAME: str = "Impatient Networks"
    APPLICATION_VERSION: str = "1.0.0"

    # Logging
    LOG_LEVEL: str = "INFO"
    LOG_FORMAT: str = "console"

    # Experiment defaults
    DEFAULT_SEED: int = 0
    OUTPUT_DIR: str = "runs"
    DTYPE: str = Field(default="float32")

    class Config:
        """Pydantic configuration."""
        env_file = ".env"
        env_file_encoding = "utf-8"
        case_sensitive = True
        extra = "ignore"

    @field_validator("LOG_LEVEL")
    @classmethod
    def validate_log_level(cls, v):
        """Validate log level."""
        valid_levels = ["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"]
        if v.upper() not in valid_levels:
            raise ValueError(f"LOG_LEVEL must be one of {valid_levels}")
        return v.upper()

    @field_validator("LOG_FORMAT")
    @classmethod
    def validate_log_format(cls, v):
        if v.lower() not in ("json", "console"):
            raise ValueError("LOG_FORMAT must be 'json' or 'console'")
        return v.lower()

    @field_validator("DTYPE")
    @classmethod
    def validate_dtype(cls, v):
        if v not in ("float32", "float64"):
            raise ValueError("DTYPE must be 'float32' or 'float64'")
        return v


# Global settings instance (lazy-loaded)
_settings_instance: Optional[Settings] = None


def get_settings() -> Settings:
    """Get the global settings instance (singleton pattern)."""
    global _settings_instance
    if _settings_instance is None:
        _settings_instance = Settings()
    return _settings_instance


settings = get_settings()


def load_run_config(
    path: Optional[Path] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """
    Load a run configuration from YAML and apply flag overrides.

    Args:
        path: YAML file; None starts from defaults
        overrides: dotted keys ("train.seed") mapped to values; None values are skipped

    Returns:
        Validated RunConfig

    Raises:
        ConfigurationError: unreadable file or schema violation
    """
    raw: Dict[str, Any] = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as f:
                loaded = yaml.safe_load(f)
        except (OSError, yaml.YAMLError) as e:
            raise ConfigurationError(f"Cannot read config {path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ConfigurationError(f"Config {path} must contain a mapping at top level")
        raw = loaded or {}

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = raw
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value

    current = get_settings()
    raw.setdefault("output_dir", f"{current.OUTPUT_DIR}/default")
    if isinstance(raw.get("train", {}), dict):
        raw.setdefault("train", {}).setdefault("seed", current.DEFAULT_SEED)

    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid run configuration: {e}") from e
