"""Map library exceptions to stable command-line error codes."""
from __future__ import annotations

import functools
import sys
from collections.abc import Callable
from typing import Any

import click

from cardioquant.container import ContainerError
from cardioquant.dataset import DatasetError
from cardioquant.evaluation import FoldError
from cardioquant.filesystem import OutputDirError
from cardioquant.geometry import GeometryError, NormalizationError
from cardioquant.gradcheck import GradcheckFailure
from cardioquant.imaging import PreprocessError
from cardioquant.losses import LossInputError
from cardioquant.metrics import MetricError
from cardioquant.networks import (
    CheckpointError,
    NetworkConfigError,
    NetworkInputError,
)
from cardioquant.optim import OptimizerError
from cardioquant.phantom import PhantomError
from cardioquant.settings import ConfigError
from cardioquant.tensor import GradientError, ShapeError
from cardioquant.training import TrainingError

EXIT_FAILURE = 1

ERROR_CODES: dict[type[Exception], str] = {
    ShapeError: "E_SHAPE",
    GradientError: "E_GRADIENT",
    ContainerError: "E_CONTAINER",
    CheckpointError: "E_CHECKPOINT",
    NetworkConfigError: "E_NETWORK_CONFIG",
    NetworkInputError: "E_NETWORK_INPUT",
    LossInputError: "E_LOSS_INPUT",
    GeometryError: "E_GEOMETRY",
    NormalizationError: "E_NORMALIZATION",
    PreprocessError: "E_PREPROCESS",
    PhantomError: "E_PHANTOM",
    DatasetError: "E_DATASET",
    OptimizerError: "E_OPTIMIZER",
    TrainingError: "E_TRAINING",
    MetricError: "E_METRIC",
    FoldError: "E_FOLD",
    ConfigError: "E_CONFIG",
    OutputDirError: "E_OUTPUT_DIR",
    GradcheckFailure: "E_GRADCHECK",
    ValueError: "E_VALUE",
    OSError: "E_IO",
}


def error_code(err: Exception) -> str:
    """Code of the most specific registered class ``err`` is an instance of."""
    for cls in type(err).__mro__:
        if cls in ERROR_CODES:
            return ERROR_CODES[cls]
    return "E_INTERNAL"


def error_line(err: Exception) -> str:
    """Render ``CODE: message`` on a single line."""
    message = " ".join(str(err).split()) or type(err).__name__
    parameter = getattr(err, "parameter", None)
    if parameter and parameter not in message:
        message = f"{message} (parameter {parameter})"
    return f"{error_code(err)}: {message}"


def handle_errors(command: Callable[..., Any]) -> Callable[..., Any]:
    """Turn registered exceptions into one stderr line and exit status 1."""

    @functools.wraps(command)
    def wrapper(*args, **kwargs):
        try:
            return command(*args, **kwargs)
        except tuple(ERROR_CODES) as err:
            click.echo(error_line(err), err=True)
            sys.exit(EXIT_FAILURE)

    return wrapper
