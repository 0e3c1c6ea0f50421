import pytest

from florence2_ros2.errors import ConfigError
from florence2_ros2.inference_backend import DevicePolicy, PrecisionPolicy
from florence2_ros2.paths import get_params_path
from florence2_ros2.settings import (
    DEFAULTS,
    build_node_config,
    load_settings,
    read_params_file,
)
from florence2_ros2.version import DEFAULT_MODEL_REVISION


def _params(tmp_path, body, node="florence2_node"):
    path = tmp_path / "params.yaml"
    path.write_text(f"{node}:\n  ros__parameters:\n" + "".join(f"    {line}\n" for line in body))
    return path


def test_defaults_without_file():
    assert load_settings(read_file=False, environ={}) == DEFAULTS


def test_shipped_params_match_defaults():
    assert read_params_file(get_params_path()) == DEFAULTS


def test_params_file_overrides_defaults(tmp_path):
    path = _params(tmp_path, ["device: cpu", "queue_depth: 4", "continuous_task: \"<OD>\""])
    settings = load_settings(path, environ={})
    assert settings["device"] == "cpu"
    assert settings["queue_depth"] == 4
    assert settings["continuous_task"] == "<OD>"
    assert settings["num_beams"] == DEFAULTS["num_beams"]


def test_wildcard_node_section(tmp_path):
    path = _params(tmp_path, ["num_beams: 1"], node="/**")
    assert load_settings(path, environ={})["num_beams"] == 1


def test_unknown_file_keys_are_ignored(tmp_path, caplog):
    path = _params(tmp_path, ["colour: blue"])
    settings = load_settings(path, environ={})
    assert "colour" not in settings
    assert "colour" in caplog.text


def test_precedence_env_then_overrides_then_file(tmp_path):
    path = _params(tmp_path, ["device: cpu", "model_revision: abc123"])
    settings = load_settings(path, overrides={"device": "gpu:0"},
                             environ={"FLORENCE2_DEVICE": "gpu:1"})
    assert settings["device"] == "gpu:1"
    assert settings["model_revision"] == "abc123"

    settings = load_settings(path, overrides={"device": "gpu:0"}, environ={})
    assert settings["device"] == "gpu:0"


def test_environment_overrides(tmp_path):
    settings = load_settings(read_file=False, environ={
        "FLORENCE2_MODEL_CACHE": "/models",
        "FLORENCE2_ALLOW_DOWNLOAD": "yes",
        "FLORENCE2_MODEL_REVISION": "deadbeef",
        "FLORENCE2_DEVICE": "",
    })
    assert settings["model_cache_dir"] == "/models"
    assert settings["allow_download"] is True
    assert settings["model_revision"] == "deadbeef"
    assert settings["device"] == "auto"


def test_unknown_override_rejected():
    with pytest.raises(ConfigError):
        load_settings(read_file=False, overrides={"nope": 1}, environ={})


@pytest.mark.parametrize("key, value", [
    ("queue_depth", "many"),
    ("queue_depth", 2.5),
    ("publish_annotated", "maybe"),
    ("mock_latency_s", "slow"),
])
def test_bad_values_rejected(key, value):
    with pytest.raises(ConfigError):
        load_settings(read_file=False, overrides={key: value}, environ={})


def test_values_are_coerced():
    settings = load_settings(read_file=False, environ={}, overrides={
        "queue_depth": "3", "mock_latency_s": 1, "publish_annotated": "false"})
    assert settings["queue_depth"] == 3
    assert settings["mock_latency_s"] == 1.0
    assert settings["publish_annotated"] is False


def test_build_node_config(registry):
    settings = load_settings(read_file=False, environ={}, overrides={
        "model": "mock",
        "device": "cpu",
        "precision": "full",
        "continuous_task": "<OD>",
        "mock_latency_s": 0.05,
        "model_cache_dir": "/cache",
        "annotation_line_width": 3,
    })
    config = build_node_config(settings, registry)
    assert config.continuous_task == "<OD>"
    assert config.backend.is_mock
    assert config.backend.device_policy == DevicePolicy("cpu")
    assert config.backend.precision_policy == PrecisionPolicy.FULL
    assert config.backend.cache_dir == "/cache"
    assert config.backend.mock_latency_s == 0.05
    assert config.annotation.line_width == 3


def test_model_revision_defaults_to_version_module(registry):
    settings = load_settings(read_file=False, environ={"FLORENCE2_MODEL_REVISION": ""},
                             overrides={"model": "mock"})
    assert build_node_config(settings, registry).backend.revision == DEFAULT_MODEL_REVISION

    settings = load_settings(read_file=False, environ={"FLORENCE2_MODEL_REVISION": "v2"},
                             overrides={"model": "mock"})
    assert build_node_config(settings, registry).backend.revision == "v2"


def test_build_node_config_empty_task_disables_continuous(registry):
    config = build_node_config(load_settings(read_file=False, environ={}), registry)
    assert config.continuous_task is None
    assert config.backend.cache_dir is None


@pytest.mark.parametrize("overrides", [
    {"precision": "half"},
    {"device": "tpu"},
    {"annotation_line_width": 0},
    {"annotation_font_scale": 0.0},
    {"num_beams": 0},
    {"continuous_task": "<NOPE>"},
    {"continuous_task": "<CAPTION_TO_PHRASE_GROUNDING>"},
])
def test_build_node_config_rejects(registry, overrides):
    settings = load_settings(read_file=False, environ={}, overrides=overrides)
    with pytest.raises(ConfigError):
        build_node_config(settings, registry)
