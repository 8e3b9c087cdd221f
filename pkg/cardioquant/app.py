"""Initialize flask and the run configuration."""
from __future__ import annotations

import os
from typing import Any

from flask import Flask

from cardioquant.settings import (
    DefaultConfig,
    load_config_file,
    seed_from_environment,
)


def create_app(
    config_object: str | object | None = None,
    config_file: os.PathLike[str] | str | None = None,
    override_dict: dict[str, Any] | None = None,
):
    """Application factory for cardioquant runs.

    Parameters
    ----------
    config_object
        Reference to an object with config vars to update after the
        defaults.

    config_file
        TOML config (or a resolved JSON snapshot) applied next.

    override_dict
        Dictionary of config vars to update last, e.g. from CLI flags.
        ``CQ_SEED`` from the environment is applied just before it.

    Returns
    -------
    Flask
        Flask-application whose config holds every run setting.
    """
    app = Flask("cardioquant")
    app.config.from_object(DefaultConfig)
    if config_object is not None:
        app.config.from_object(config_object)

    if config_file is not None:
        app.config.update(load_config_file(config_file))

    seed = seed_from_environment(os.environ)
    if seed is not None:
        app.config["RUN_SEED"] = seed

    # Overwrite config
    if override_dict is not None:
        app.config.update(override_dict)

    app.logger.setLevel(app.config["LOG_LEVEL"])
    return app
