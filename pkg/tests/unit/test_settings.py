"""Unit tests of config loading and the settings builders."""

import json

import pytest

from cardioquant.app import create_app
from cardioquant.settings import (
    SEED_VARIABLE,
    SNAPSHOT_NAME,
    ConfigError,
    config_keys,
    drunet_config,
    flatten_sections,
    load_config_file,
    phantom_ranges,
    pipeline_config,
    resolved_config,
    seed_from_environment,
    write_resolved_config,
)


def test_flatten_sections():
    """Sections map to upper-case prefixed keys."""
    flat = flatten_sections(
        {"log_level": "DEBUG", "run": {"seed": 4}, "drunet": {"depth": 2}},
    )
    assert flat == {"LOG_LEVEL": "DEBUG", "RUN_SEED": 4, "DRUNET_DEPTH": 2}


def test_unknown_section():
    """Sections outside the known list are refused."""
    with pytest.raises(ConfigError, match="section"):
        flatten_sections({"optimizer": {"lr": 1.0}})


def test_unknown_key():
    """Keys outside a section's list are refused."""
    with pytest.raises(ConfigError, match="learning_rate"):
        flatten_sections({"train": {"learning_rate": 1.0}})


def test_toml_file(tmp_path):
    """TOML config files load into flat keys."""
    path = tmp_path / "run.toml"
    path.write_text('[run]\nseed = 9\n\n[eval]\nfolds = 3\n')
    assert load_config_file(path) == {"RUN_SEED": 9, "EVAL_FOLDS": 3}


def test_broken_toml(tmp_path):
    """Parse errors become ConfigError."""
    path = tmp_path / "run.toml"
    path.write_text("[run\nseed = ")
    with pytest.raises(ConfigError, match="parse"):
        load_config_file(path)


def test_missing_config_file(tmp_path):
    """A missing file is a ConfigError."""
    with pytest.raises(ConfigError, match="does not exist"):
        load_config_file(tmp_path / "absent.toml")


def test_snapshot_round_trip(tmp_path, app):
    """A written snapshot reloads to the same configuration."""
    path = write_resolved_config(tmp_path, app.config)
    assert path.name == SNAPSHOT_NAME
    reloaded = create_app(config_file=path)
    for key in config_keys():
        assert reloaded.config[key] == json.loads(
            json.dumps(app.config[key]),
        )


def test_snapshot_is_sectioned(app):
    """The snapshot groups keys by section."""
    snapshot = resolved_config(app.config)
    assert snapshot["run"]["seed"] == 3
    assert snapshot["drunet"]["depth"] == 2
    assert snapshot["log_level"] == "DEBUG"


def test_seed_from_environment():
    """CQ_SEED is parsed when set and non-empty."""
    assert seed_from_environment({}) is None
    assert seed_from_environment({SEED_VARIABLE: ""}) is None
    assert seed_from_environment({SEED_VARIABLE: "12"}) == 12
    with pytest.raises(ConfigError):
        seed_from_environment({SEED_VARIABLE: "twelve"})


def test_environment_seed_applies_before_overrides(monkeypatch):
    """CQ_SEED beats config files, explicit overrides beat CQ_SEED."""
    monkeypatch.setenv(SEED_VARIABLE, "21")
    assert create_app().config["RUN_SEED"] == 21
    assert create_app(override_dict={"RUN_SEED": 5}).config["RUN_SEED"] == 5


def test_builders_follow_config(app):
    """Settings objects reflect the flat config."""
    assert drunet_config(app.config).depth == 2
    assert phantom_ranges(app.config).r_ed == (7.0, 8.0)
    pipeline = pipeline_config(app.config)
    assert pipeline.train.seed == 3
    assert pipeline.stmt.channels == (2, 4)
    assert pipeline.augment.factor == 1


def test_defaults_describe_full_size_model():
    """Without overrides the networks take their full-size topology."""
    config = create_app().config
    assert drunet_config(config).base_filters == 16
    assert config["TRAIN_WALL_TIME"] is False
