from __future__ import annotations

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import ValidationError

from .errors import ConfigError
from .state import ExperimentConfig, TrainConfig


DEFAULTS_PATH = Path(__file__).resolve().parents[1] / "config" / "defaults.json"

OUTPUT_ROOT_ENV = "SESSIONREC_OUTPUT_ROOT"
LOG_LEVEL_ENV = "SESSIONREC_LOG_LEVEL"

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s: %(message)s"


def configure_logging(level: Optional[str] = None) -> None:
    """Install the single root handler used by the CLI and the test suite."""
    name = (level or os.getenv(LOG_LEVEL_ENV) or "INFO").strip().upper()
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format=LOG_FORMAT)


def _strip_docs(node: Any) -> Any:
    if isinstance(node, dict):
        return {k: _strip_docs(v) for k, v in node.items() if k != "_doc"}
    if isinstance(node, list):
        return [_strip_docs(v) for v in node]
    return node


def _deep_merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_defaults() -> Dict[str, Any]:
    with DEFAULTS_PATH.open("r", encoding="utf-8") as f:
        return _strip_docs(json.load(f))


def build_experiment_config(overrides: Dict[str, Any]) -> ExperimentConfig:
    """Merge a user config over the shipped defaults and validate it."""
    merged = _deep_merge(load_defaults(), _strip_docs(overrides))
    try:
        return ExperimentConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid experiment config: {exc}") from exc


def build_train_config(overrides: Dict[str, Any]) -> TrainConfig:
    """TrainConfig from the defaults' `train` section with command-line overrides on top."""
    merged = _deep_merge(load_defaults().get("train", {}), {k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig.model_validate(merged)
    except ValidationError as exc:
        raise ConfigError(f"invalid training config: {exc}") from exc


def load_experiment_config(path: Path) -> ExperimentConfig:
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        with path.open("r", encoding="utf-8") as f:
            overrides = json.load(f)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return build_experiment_config(overrides)


def resolve_output_dir(output_dir: str) -> Path:
    """
    Resolve an experiment's output directory.

    Relative paths land under SESSIONREC_OUTPUT_ROOT (default "runs").
    """
    path = Path(output_dir)
    if path.is_absolute():
        return path
    return Path(os.getenv(OUTPUT_ROOT_ENV) or "runs") / path
