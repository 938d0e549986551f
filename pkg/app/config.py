"""Configuration for aesfusor.

Environment-driven paths and credentials live on ``Config``. Run settings are
pydantic models loaded from YAML and overridden by command-line flags
(flags > file > defaults).
"""

import os
from pathlib import Path
from typing import Any, TypeVar

import yaml
from pydantic import BaseModel

from app.logger import logger

SettingsT = TypeVar("SettingsT", bound=BaseModel)


class Config:
    """Process-wide configuration."""

    # Application paths
    BASE_DIR = Path(__file__).parent.parent
    CONFIG_DIR = BASE_DIR / 'configs'
    OUTPUT_DIR = Path(os.environ.get('AESFUSOR_OUTPUT_DIR', BASE_DIR / 'out'))
    CACHE_DIR = Path(os.environ.get('AESFUSOR_CACHE_DIR', BASE_DIR / '.llm_cache'))

    # LLM endpoint
    LLM_API_KEY = os.environ.get('LLM_API_KEY', '')
    LLM_BASE_URL = os.environ.get('LLM_BASE_URL', 'https://api.openai.com/v1')
    LLM_TIMEOUT = float(os.environ.get('LLM_TIMEOUT', '60'))

    # Tool version recorded in run manifests
    TOOL_VERSION = '0.1.0'

    @classmethod
    def ensure_directories(cls):
        """Ensure required directories exist."""
        cls.OUTPUT_DIR.mkdir(parents=True, exist_ok=True)
        cls.CACHE_DIR.mkdir(parents=True, exist_ok=True)


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    """Merge ``override`` into ``base`` recursively.

    ``None`` values in ``override`` mean "not given" and never replace
    anything.

    Args:
        base: Lower-precedence mapping
        override: Higher-precedence mapping

    Returns:
        New merged dictionary
    """
    merged = dict(base)
    for key, value in override.items():
        if value is None:
            continue
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def read_yaml(path: str | Path | None) -> dict[str, Any]:
    """Read a YAML mapping, or return an empty one when no path is given.

    Raises:
        yaml.YAMLError: If the file is not valid YAML
        ValueError: If the document is not a mapping
    """
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ValueError(f"Config file {path} must contain a mapping, got {type(data).__name__}")
    return data


def load_settings(
    model_cls: type[SettingsT],
    path: str | Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> SettingsT:
    """Build a settings model from defaults, a YAML file and flag overrides.

    Args:
        model_cls: Pydantic settings model to validate into
        path: Optional YAML config file
        overrides: Nested flag values (``None`` entries are ignored)

    Returns:
        Validated settings instance

    Raises:
        pydantic.ValidationError: If the merged values are invalid
    """
    data = deep_merge(read_yaml(path), overrides or {})
    logger.debug(f"Loading {model_cls.__name__} from {path or 'defaults'} with {len(overrides or {})} override groups")
    return model_cls.model_validate(data)
