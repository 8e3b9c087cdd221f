"""Default configuration, config files and typed settings builders.

The Flask config is a flat mapping. Config files group keys in tables, one
per section; key ``k`` in table ``s`` becomes ``S_K``. Builders below turn
the flat mapping into the dataclasses the library is parameterised by.
"""
from __future__ import annotations

import json
import os
import tomllib
from collections.abc import Mapping
from pathlib import Path
from typing import Any

from cardioquant.evaluation import EvalSettings
from cardioquant.filesystem import write_json
from cardioquant.gradcheck import GradcheckSettings
from cardioquant.imaging import AugmentSettings, PreprocessSettings
from cardioquant.losses import LossWeights
from cardioquant.networks import DrUnetConfig, StmtConfig
from cardioquant.phantom import PhantomRanges
from cardioquant.training import PipelineConfig, TrainSettings

SECTIONS = (
    "run",
    "phantom",
    "preprocess",
    "augment",
    "drunet",
    "stmt",
    "loss",
    "train",
    "eval",
    "quantify",
    "gradcheck",
)
TOP_LEVEL_KEYS = ("LOG_LEVEL",)
SNAPSHOT_NAME = "resolved_config.json"
SEED_VARIABLE = "CQ_SEED"


class DefaultConfig:
    """Defaults of every configurable value."""

    LOG_LEVEL = "INFO"

    RUN_SEED = 0
    RUN_DATASET = ""

    PHANTOM_SUBJECTS = 20
    PHANTOM_FRAMES = 20
    PHANTOM_SIZE = 80
    PHANTOM_SPACING = [0.6836, 2.0833]
    PHANTOM_R_ED = [16.0, 22.0]
    PHANTOM_ES_RATIO = [0.55, 0.7]
    PHANTOM_WALL_THICKNESS = [5.0, 8.0]
    PHANTOM_SECTOR_OFFSET = [-1.0, 1.0]
    PHANTOM_ES_FRAME = [7, 12]
    PHANTOM_THICKENING = [0.0, 0.3]
    PHANTOM_CENTER_JITTER = 3.0
    PHANTOM_NOISE_STD = 0.05
    PHANTOM_INTENSITIES = [0.1, 0.9, 0.4]

    PREPROCESS_CLAHE = True
    PREPROCESS_TILE_GRID = [8, 8]
    PREPROCESS_CLIP_LIMIT = 2.0
    PREPROCESS_BINS = 256
    PREPROCESS_ZSCORE = True

    AUGMENT_OPS = ["rotate", "flip_h", "flip_v", "elastic"]
    AUGMENT_MAX_ROTATION = 30.0
    AUGMENT_FLIP_PROBABILITY = 0.5
    AUGMENT_ELASTIC_PROBABILITY = 0.5
    AUGMENT_ELASTIC_ALPHA = 8.0
    AUGMENT_ELASTIC_SIGMA = 4.0

    DRUNET_BASE_FILTERS = 16
    DRUNET_DEPTH = 4
    DRUNET_DILATIONS = [1, 2, 4, 8]
    DRUNET_SPATIAL_MODE = "2d"
    DRUNET_INPUT_SIZE = 80

    STMT_CHANNELS = [32, 64, 128]
    STMT_TEMPORAL_KERNEL = 3
    STMT_SPATIAL_KERNEL = 3
    STMT_POOL = [1, 3, 3]
    STMT_BLOCK_KIND = "factorized"
    STMT_HEAD_WIDTH = 0
    STMT_WEIGHT_DECAY = 1e-4

    LOSS_CLASS_WEIGHTS = [0.2, 0.3, 0.5]
    LOSS_MULTISTAGE = [1.0, 4.0]
    LOSS_END_TO_END = [10.0, 1.0, 1.0]
    LOSS_DICE_VARIANT = "verbatim"

    TRAIN_STRATEGY = "multistage"
    TRAIN_SEG_EPOCHS = 300
    TRAIN_STMT_EPOCHS = 300
    TRAIN_JOINT_EPOCHS = 300
    TRAIN_SEG_LR = 1e-4
    TRAIN_STMT_LR = 4e-3
    TRAIN_AUGMENT_FACTOR = 1
    TRAIN_WALL_TIME = False
    TRAIN_PRECISION = "float32"

    EVAL_FOLDS = 5
    EVAL_WORKERS = 1
    EVAL_CCA = True
    EVAL_CONNECTIVITY = 8

    QUANTIFY_CCA = True
    QUANTIFY_CONNECTIVITY = 8

    GRADCHECK_EPS = 1e-5
    GRADCHECK_TOLERANCE = 1e-4
    GRADCHECK_SAMPLES = 6
    GRADCHECK_SIZE = 16


def config_keys() -> tuple[str, ...]:
    """Every key a config file or override may set."""
    return tuple(sorted(key for key in vars(DefaultConfig) if key.isupper()))


def flatten_sections(content: Mapping[str, Any]) -> dict[str, Any]:
    """Map ``{section: {key: value}}`` (plus top-level keys) to flat keys.

    Raises
    ------
    ConfigError
        On an unknown section or key.
    """
    known = set(config_keys())
    flat = {}
    for name, value in content.items():
        if isinstance(value, Mapping):
            if name not in SECTIONS:
                msg = f"Unknown config section [{name}]"
                raise ConfigError(msg)
            for key, item in value.items():
                flat_key = f"{name}_{key}".upper()
                if flat_key not in known:
                    msg = f"Unknown config key {key!r} in section [{name}]"
                    raise ConfigError(msg)
                flat[flat_key] = item
        elif name.upper() in TOP_LEVEL_KEYS:
            flat[name.upper()] = value
        else:
            msg = f"Unknown top-level config key {name!r}"
            raise ConfigError(msg)
    return flat


def load_config_file(path: os.PathLike[str] | str) -> dict[str, Any]:
    """Read a TOML config (or a JSON snapshot) into flat keys.

    Raises
    ------
    ConfigError
        If the file is missing, does not parse or names unknown keys.
    """
    config_path = Path(path)
    if not config_path.is_file():
        msg = f"Config file {config_path} does not exist"
        raise ConfigError(msg)
    try:
        if config_path.suffix == ".json":
            content = json.loads(config_path.read_text(encoding="utf-8"))
        else:
            with config_path.open("rb") as config_file:
                content = tomllib.load(config_file)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as err:
        msg = f"Could not parse config file {config_path}: {err}"
        raise ConfigError(msg) from err
    if not isinstance(content, dict):
        msg = f"Config file {config_path} must hold a table of sections"
        raise ConfigError(msg)
    return flatten_sections(content)


def seed_from_environment(environ: Mapping[str, str]) -> int | None:
    """Parse ``CQ_SEED`` if it is set."""
    raw = environ.get(SEED_VARIABLE)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        msg = f"{SEED_VARIABLE} must be an integer, got {raw!r}"
        raise ConfigError(msg) from None


def resolved_config(config: Mapping[str, Any]) -> dict[str, Any]:
    """Group the configurable keys of ``config`` back into sections."""
    snapshot: dict[str, Any] = {}
    for key in config_keys():
        value = config[key]
        if isinstance(value, tuple):
            value = list(value)
        if key in TOP_LEVEL_KEYS:
            snapshot[key.lower()] = value
            continue
        section, name = key.lower().split("_", 1)
        snapshot.setdefault(section, {})[name] = value
    return snapshot


def write_resolved_config(
    out_dir: os.PathLike[str] | str,
    config: Mapping[str, Any],
) -> Path:
    """Write ``resolved_config.json`` into ``out_dir``."""
    path = Path(out_dir) / SNAPSHOT_NAME
    write_json(path, resolved_config(config))
    return path


def _pair(value: Any) -> tuple:
    return tuple(value)


def phantom_ranges(config: Mapping[str, Any]) -> PhantomRanges:
    return PhantomRanges(
        frames=int(config["PHANTOM_FRAMES"]),
        size=int(config["PHANTOM_SIZE"]),
        spacing=_pair(config["PHANTOM_SPACING"]),
        r_ed=_pair(config["PHANTOM_R_ED"]),
        es_ratio=_pair(config["PHANTOM_ES_RATIO"]),
        wall_thickness=_pair(config["PHANTOM_WALL_THICKNESS"]),
        sector_offset=_pair(config["PHANTOM_SECTOR_OFFSET"]),
        es_frame=tuple(int(v) for v in config["PHANTOM_ES_FRAME"]),
        thickening=_pair(config["PHANTOM_THICKENING"]),
        center_jitter=float(config["PHANTOM_CENTER_JITTER"]),
        noise_std=float(config["PHANTOM_NOISE_STD"]),
        intensities=_pair(config["PHANTOM_INTENSITIES"]),
    )


def preprocess_settings(config: Mapping[str, Any]) -> PreprocessSettings:
    return PreprocessSettings(
        clahe=bool(config["PREPROCESS_CLAHE"]),
        tile_grid=tuple(int(v) for v in config["PREPROCESS_TILE_GRID"]),
        clip_limit=float(config["PREPROCESS_CLIP_LIMIT"]),
        bins=int(config["PREPROCESS_BINS"]),
        zscore=bool(config["PREPROCESS_ZSCORE"]),
    )


def augment_settings(config: Mapping[str, Any]) -> AugmentSettings:
    return AugmentSettings(
        ops=tuple(config["AUGMENT_OPS"]),
        max_rotation=float(config["AUGMENT_MAX_ROTATION"]),
        flip_probability=float(config["AUGMENT_FLIP_PROBABILITY"]),
        elastic_probability=float(config["AUGMENT_ELASTIC_PROBABILITY"]),
        elastic_alpha=float(config["AUGMENT_ELASTIC_ALPHA"]),
        elastic_sigma=float(config["AUGMENT_ELASTIC_SIGMA"]),
        factor=int(config["TRAIN_AUGMENT_FACTOR"]),
    )


def drunet_config(config: Mapping[str, Any]) -> DrUnetConfig:
    return DrUnetConfig(
        base_filters=int(config["DRUNET_BASE_FILTERS"]),
        depth=int(config["DRUNET_DEPTH"]),
        dilations=tuple(int(v) for v in config["DRUNET_DILATIONS"]),
        spatial_mode=str(config["DRUNET_SPATIAL_MODE"]),
        input_size=int(config["DRUNET_INPUT_SIZE"]),
    )


def stmt_config(config: Mapping[str, Any]) -> StmtConfig:
    return StmtConfig(
        channels=tuple(int(v) for v in config["STMT_CHANNELS"]),
        temporal_kernel=int(config["STMT_TEMPORAL_KERNEL"]),
        spatial_kernel=int(config["STMT_SPATIAL_KERNEL"]),
        pool=tuple(int(v) for v in config["STMT_POOL"]),
        block_kind=str(config["STMT_BLOCK_KIND"]),
        head_width=int(config["STMT_HEAD_WIDTH"]),
        weight_decay=float(config["STMT_WEIGHT_DECAY"]),
    )


def loss_weights(config: Mapping[str, Any]) -> LossWeights:
    return LossWeights(
        class_weights=tuple(float(v) for v in config["LOSS_CLASS_WEIGHTS"]),
        multistage=tuple(float(v) for v in config["LOSS_MULTISTAGE"]),
        end_to_end=tuple(float(v) for v in config["LOSS_END_TO_END"]),
        dice_variant=str(config["LOSS_DICE_VARIANT"]),
    )


def train_settings(config: Mapping[str, Any]) -> TrainSettings:
    return TrainSettings(
        strategy=str(config["TRAIN_STRATEGY"]),
        seg_epochs=int(config["TRAIN_SEG_EPOCHS"]),
        stmt_epochs=int(config["TRAIN_STMT_EPOCHS"]),
        joint_epochs=int(config["TRAIN_JOINT_EPOCHS"]),
        seg_lr=float(config["TRAIN_SEG_LR"]),
        stmt_lr=float(config["TRAIN_STMT_LR"]),
        augment_factor=int(config["TRAIN_AUGMENT_FACTOR"]),
        wall_time=bool(config["TRAIN_WALL_TIME"]),
        precision=str(config["TRAIN_PRECISION"]),
        seed=int(config["RUN_SEED"]),
    )


def eval_settings(config: Mapping[str, Any]) -> EvalSettings:
    return EvalSettings(
        folds=int(config["EVAL_FOLDS"]),
        workers=int(config["EVAL_WORKERS"]),
        cca=bool(config["EVAL_CCA"]),
        connectivity=int(config["EVAL_CONNECTIVITY"]),
    )


def gradcheck_settings(config: Mapping[str, Any]) -> GradcheckSettings:
    return GradcheckSettings(
        eps=float(config["GRADCHECK_EPS"]),
        tolerance=float(config["GRADCHECK_TOLERANCE"]),
        samples=int(config["GRADCHECK_SAMPLES"]),
        size=int(config["GRADCHECK_SIZE"]),
        seed=int(config["RUN_SEED"]),
    )


def pipeline_config(config: Mapping[str, Any]) -> PipelineConfig:
    """Everything training and evaluation need, built from flat keys."""
    return PipelineConfig(
        drunet=drunet_config(config),
        stmt=stmt_config(config),
        weights=loss_weights(config),
        train=train_settings(config),
        preprocess=preprocess_settings(config),
        augment=augment_settings(config),
    )


class ConfigError(Exception):
    """Exception raised for unreadable or invalid configuration."""
