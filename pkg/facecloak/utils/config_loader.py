"""Experiment configuration loading"""
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml
from pydantic import ValidationError

from facecloak.errors import ConfigurationError, MissingArtifactError
from facecloak.models.schemas import ExperimentConfig

logger = logging.getLogger('facecloak')

DEFAULT_CONFIG = "config.yaml"


def resolve_config_path(path: Optional[str] = None) -> Optional[Path]:
    """--config wins, then FACECLOAK_CONFIG, then ./config.yaml if present."""
    candidate = path or os.getenv('FACECLOAK_CONFIG')
    if candidate:
        return Path(candidate)
    default = Path(DEFAULT_CONFIG)
    return default if default.exists() else None


def parse_config(raw: Dict[str, Any], source: str = "<memory>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        logger.error(f"Invalid configuration in {source}: {e}")
        raise ConfigurationError(f"Invalid configuration in {source}: {e}") from e


def load_config(path: Optional[str] = None, seed: Optional[int] = None) -> ExperimentConfig:
    """Read a YAML experiment config; ``seed`` and FACECLOAK_OUTPUT_DIR override the file."""
    config_path = resolve_config_path(path)
    raw: Dict[str, Any] = {}
    if config_path is not None:
        if not config_path.exists():
            raise MissingArtifactError(f"Config file not found: {config_path}")
        try:
            raw = yaml.safe_load(config_path.read_text(encoding='utf-8')) or {}
        except yaml.YAMLError as e:
            raise ConfigurationError(f"Could not parse {config_path}: {e}") from e
        if not isinstance(raw, dict):
            raise ConfigurationError(f"{config_path} must contain a mapping at the top level")
        logger.debug(f"Loaded configuration from {config_path}")
    else:
        logger.info("No config file given, using built-in defaults")

    if seed is not None:
        raw = dict(raw)
        raw['seed'] = seed
        world = dict(raw.get('world') or {})
        world['seed'] = seed
        raw['world'] = world
    output_dir = os.getenv('FACECLOAK_OUTPUT_DIR')
    if output_dir:
        raw = dict(raw)
        raw['output_dir'] = output_dir
    return parse_config(raw, str(config_path or "<defaults>"))
