"""
Settings management for the Florence-2 node.
Reads a ROS-style parameter file, overlays environment overrides, and builds
the typed configuration the engine and backend consume.
"""

import logging
import os
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .errors import ConfigError
from .inference_backend import (
    BackendConfig,
    DevicePolicy,
    GenerationParams,
    PrecisionPolicy,
)
from .node_core import NodeConfig
from .paths import get_params_path
from .result_mapping import AnnotationStyle
from .task_registry import TaskRegistry
from .version import DEFAULT_MODEL_ID, DEFAULT_MODEL_REVISION

logger = logging.getLogger(__name__)

NODE_NAME = "florence2_node"

# Default settings; keys are the node parameter names
DEFAULTS = {
    "image_topic": "/camera/image_raw",
    "model": DEFAULT_MODEL_ID,
    "model_revision": "",  # empty: DEFAULT_MODEL_REVISION
    "device": "auto",
    "precision": "auto",
    "continuous_task": "",  # empty disables continuous mode
    "continuous_text_input": "",
    "publish_annotated": True,
    "max_new_tokens": 1024,
    "num_beams": 3,
    "do_sample": False,
    "queue_depth": 8,
    "mock_latency_s": 0.0,
    "allow_download": False,
    "model_cache_dir": "",
    "annotation_line_width": 2,
    "annotation_font_scale": 1.0,
    "publish_diagnostics": True,
}

ENV_OVERRIDES = {
    "FLORENCE2_MODEL_CACHE": "model_cache_dir",
    "FLORENCE2_DEVICE": "device",
    "FLORENCE2_ALLOW_DOWNLOAD": "allow_download",
    "FLORENCE2_MODEL_REVISION": "model_revision",
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off", "")


def _coerce(key: str, value: Any) -> Any:
    """Convert a raw value to the type of its default."""
    default = DEFAULTS[key]
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                text = value.strip().lower()
                if text in _TRUE:
                    return True
                if text in _FALSE:
                    return False
                raise ValueError(value)
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"parameter {key} has invalid value {value!r}")


def read_params_file(path: Union[str, Path], node_name: str = NODE_NAME) -> dict:
    """Parameters for node_name from a `node: ros__parameters:` YAML file."""
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    for name in (node_name, f"/{node_name}", "/**"):
        section = data.get(name)
        if isinstance(section, dict) and "ros__parameters" in section:
            return dict(section["ros__parameters"] or {})
    return {}


def load_settings(path: Optional[Union[str, Path]] = None, overrides: Optional[dict] = None,
                  environ: Optional[dict] = None, read_file: bool = True) -> dict:
    """
    Load settings: defaults, then the params file, then explicit overrides
    (node parameters), then the environment.
    """
    settings = DEFAULTS.copy()

    path = Path(path) if path else get_params_path()
    if read_file and path.exists():
        saved = read_params_file(path)
        unknown = sorted(set(saved) - set(DEFAULTS))
        if unknown:
            logger.warning(f"Ignoring unknown parameters in {path}: {', '.join(unknown)}")
        settings.update({k: v for k, v in saved.items() if k in DEFAULTS})

    for key, value in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown parameter {key}")
        settings[key] = value

    environ = os.environ if environ is None else environ
    for var, key in ENV_OVERRIDES.items():
        if environ.get(var):
            settings[key] = environ[var]

    return {key: _coerce(key, value) for key, value in settings.items()}


def build_node_config(settings: dict, registry: TaskRegistry) -> NodeConfig:
    """Typed NodeConfig from flat settings. Raises CONFIG_INVALID."""
    try:
        precision = PrecisionPolicy(settings["precision"])
    except ValueError:
        raise ConfigError(f"precision must be auto, full or reduced, got {settings['precision']!r}")
    if settings["annotation_line_width"] < 1:
        raise ConfigError("annotation_line_width must be >= 1")
    if settings["annotation_font_scale"] <= 0:
        raise ConfigError("annotation_font_scale must be > 0")

    backend = BackendConfig(
        model_id=settings["model"],
        device_policy=DevicePolicy.parse(settings["device"]),
        precision_policy=precision,
        generation=GenerationParams(
            max_new_tokens=settings["max_new_tokens"],
            num_beams=settings["num_beams"],
            sampling_enabled=settings["do_sample"],
        ),
        revision=settings["model_revision"] or DEFAULT_MODEL_REVISION,
        cache_dir=settings["model_cache_dir"] or None,
        allow_download=settings["allow_download"],
        mock_latency_s=settings["mock_latency_s"],
    )
    config = NodeConfig(
        image_topic=settings["image_topic"],
        backend=backend,
        continuous_task=settings["continuous_task"] or None,
        continuous_text_input=settings["continuous_text_input"],
        publish_annotated=settings["publish_annotated"],
        queue_depth=settings["queue_depth"],
        annotation=AnnotationStyle(
            line_width=settings["annotation_line_width"],
            font_scale=settings["annotation_font_scale"],
        ),
    )
    config.validate(registry)
    return config
