"""Layered run configuration: settings defaults, then a JSON file, then explicit overrides."""
import json
import logging
from pathlib import Path
from typing import Any, Dict, Mapping, Optional

from django.conf import settings

from .errors import ConfigError
from .forms import RunConfigForm
from .services import RunConfig

logger = logging.getLogger(__name__)


def _normalize(key: str, value: Any) -> Any:
    if key == "hidden_dims" and isinstance(value, (list, tuple)):
        return ",".join(str(width) for width in value)
    return value


def read_config_file(path) -> Dict[str, Any]:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError(f"Config file {path} does not exist.") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"Config file {path} must hold a flat JSON object.")
    return raw


def merge_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> Dict[str, Any]:
    """Flat key-value mapping after applying the file and then non-None overrides to the defaults."""
    merged = dict(settings.IMCO_DEFAULTS)
    layers = []
    if path:
        layers.append((str(path), read_config_file(path)))
    if overrides:
        layers.append(("overrides", {key: value for key, value in overrides.items() if value is not None}))
    for source, values in layers:
        unknown = sorted(set(values) - set(merged))
        if unknown:
            raise ConfigError(f"Unknown config keys in {source}: {', '.join(unknown)}.", errors={"unknown": unknown})
        merged.update({key: _normalize(key, value) for key, value in values.items()})
    return merged


def load_run_config(path=None, overrides: Optional[Mapping[str, Any]] = None) -> RunConfig:
    merged = merge_config(path, overrides)
    config = RunConfigForm(data=merged).to_run_config()
    logger.debug("Resolved run configuration: %s", merged)
    return config
