"""Test fixtures."""

from dataclasses import dataclass

import numpy as np
import pytest
from click.testing import CliRunner

from cardioquant.app import create_app
from cardioquant.cli import cli
from cardioquant.dataset import Subject, write_dataset
from cardioquant.phantom import (
    PhantomParams,
    PhantomRanges,
    generate_cohort,
    generate_phantom,
)
from cardioquant.settings import pipeline_config


@dataclass
class TestConfig:
    """Minimal config class with sizes small enough for the test suite."""

    LOG_LEVEL = "DEBUG"

    RUN_SEED = 3

    PHANTOM_SUBJECTS = 4
    PHANTOM_FRAMES = 8
    PHANTOM_SIZE = 32
    PHANTOM_R_ED = [7.0, 8.0]
    PHANTOM_WALL_THICKNESS = [2.5, 3.5]
    PHANTOM_SECTOR_OFFSET = [-0.5, 0.5]
    PHANTOM_ES_FRAME = [3, 5]
    PHANTOM_THICKENING = [0.0, 0.2]
    PHANTOM_CENTER_JITTER = 1.0

    PREPROCESS_TILE_GRID = [4, 4]

    DRUNET_BASE_FILTERS = 2
    DRUNET_DEPTH = 2
    DRUNET_DILATIONS = [1, 2]
    DRUNET_INPUT_SIZE = 32

    STMT_CHANNELS = [2, 4]
    STMT_POOL = [1, 2, 2]

    TRAIN_SEG_EPOCHS = 2
    TRAIN_STMT_EPOCHS = 2
    TRAIN_JOINT_EPOCHS = 2

    EVAL_FOLDS = 2

    GRADCHECK_SAMPLES = 2

    TESTING = True


@pytest.fixture()
def app():
    """Make an app with the test config and push its context."""
    app = create_app(config_object=TestConfig())
    with app.app_context():
        yield app


@pytest.fixture()
def small_ranges():
    """Phantom ranges matching the test config."""
    return PhantomRanges(
        frames=8,
        size=32,
        r_ed=(7.0, 8.0),
        wall_thickness=(2.5, 3.5),
        sector_offset=(-0.5, 0.5),
        es_frame=(3, 5),
        thickening=(0.0, 0.2),
        center_jitter=1.0,
    )


@pytest.fixture()
def ring_params():
    """A uniform-wall phantom on a 32 px grid."""
    return PhantomParams(
        subject_id="sub-ring",
        center=(15.5, 15.5),
        r_ed=8.0,
        r_es=5.0,
        wall_thickness=3.0,
        es_frame=4.0,
        noise_std=0.0,
        frames=8,
        size=32,
        seed=11,
    )


@pytest.fixture()
def ring_subject(ring_params):
    """The uniform-wall phantom wrapped as a subject."""
    return Subject.from_phantom(generate_phantom(ring_params))


@pytest.fixture()
def subjects(small_ranges):
    """Four small random phantom subjects."""
    return [
        Subject.from_phantom(sample)
        for sample in generate_cohort(4, seed=5, ranges=small_ranges)
    ]


@pytest.fixture()
def dataset_dir(tmp_path, subjects):
    """The four small subjects written as an on-disk dataset."""
    return write_dataset(tmp_path / "dataset", subjects)


@pytest.fixture()
def tiny_pipeline(app):
    """Pipeline settings of the test config."""
    return pipeline_config(app.config)


@pytest.fixture()
def rng():
    """A fixed generator."""
    return np.random.default_rng(1234)


@pytest.fixture()
def cli_runner():
    """A click runner whose commands see the test config."""
    runner = CliRunner()

    def invoke(*args):
        return runner.invoke(
            cli,
            [str(arg) for arg in args],
            obj=TestConfig(),
        )

    return invoke
