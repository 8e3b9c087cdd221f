"""Finite-difference verification of every differentiable operation.

Each case builds a scalar loss from 64-bit leaves, runs one reverse sweep and
compares the gradient with central differences. Primitive operations are
checked on every coordinate with inputs kept away from kinks and ties.
Network-sized cases check the coordinates with the largest analytic
gradients per parameter tensor; a coordinate whose two step sizes disagree
sits on a ReLU or pooling kink and is skipped rather than scored.
"""
from __future__ import annotations

import logging
import os
from collections.abc import Callable, Iterable, Sequence
from dataclasses import dataclass

import numpy as np

from cardioquant.filesystem import write_csv
from cardioquant.losses import (
    LossWeights,
    bce_loss,
    end_to_end_loss,
    mse_loss,
    multitask_loss,
    soft_dice_loss,
)
from cardioquant.networks import (
    DrUnetConfig,
    StmtConfig,
    build_drunet,
    build_stmt,
    frame_probabilities,
    multitask_input,
    segmentation_input,
)
from cardioquant.tensor import (
    BatchNormState,
    ComputationGraph,
    ConvSpec,
    Tensor,
    backward,
    batchnorm,
    concat,
    conv_nd,
    dense,
    maxpool_nd,
    relu,
    sigmoid,
    softmax,
    upsample_nearest,
)

logger = logging.getLogger(__name__)

GRADCHECK_HEADER = (
    "op",
    "max_relative_error",
    "checked",
    "skipped",
    "passed",
)
ERROR_FLOOR = 1e-5
KINK_MARGIN = 0.1

LossFn = Callable[[], Tensor]
CaseBuilder = Callable[
    [np.random.Generator, "GradcheckSettings"],
    tuple[LossFn, list[Tensor]],
]


@dataclass(frozen=True)
class GradcheckSettings:
    """Step size, pass threshold and problem size of the suite.

    Attributes
    ----------
    eps
        Central-difference step.

    tolerance
        A case passes when its largest relative error is below this.

    samples
        Coordinates checked per parameter tensor in network cases.

    size
        Spatial side of the reduced networks' input.

    seed
        Seed from which every case draws its own generator.
    """

    eps: float = 1e-5
    tolerance: float = 1e-4
    samples: int = 6
    size: int = 16
    seed: int = 0

    def __post_init__(self):
        """Validate the settings."""
        if self.eps <= 0 or self.tolerance <= 0:
            msg = "eps and tolerance must be > 0"
            raise ValueError(msg)
        if self.samples < 1:
            msg = f"samples must be >= 1, got {self.samples}"
            raise ValueError(msg)
        if self.size < 8 or self.size % 4:  # noqa: PLR2004
            msg = f"size must be a multiple of 4 and >= 8, got {self.size}"
            raise ValueError(msg)


@dataclass(frozen=True)
class GradcheckRow:
    """Outcome of one case."""

    op: str
    max_relative_error: float
    checked: int
    skipped: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_relative_error < self.tolerance

    def as_row(self) -> tuple:
        return (
            self.op,
            self.max_relative_error,
            self.checked,
            self.skipped,
            self.passed,
        )


@dataclass(frozen=True)
class GradcheckCase:
    """A named loss builder; ``exhaustive`` cases check every coordinate."""

    name: str
    build: CaseBuilder
    exhaustive: bool = True


def relative_error(analytic: float, numeric: float) -> float:
    """``|a - n| / max(|a|, |n|, 1e-5)``."""
    scale = max(abs(analytic), abs(numeric), ERROR_FLOOR)
    return abs(analytic - numeric) / scale


def central_difference(
    loss_fn: LossFn,
    tensor: Tensor,
    index: tuple[int, ...],
    eps: float,
) -> float:
    """Two-sided difference quotient of the loss along one coordinate."""
    original = tensor.data[index]
    try:
        tensor.data[index] = original + eps
        plus = loss_fn().item()
        tensor.data[index] = original - eps
        minus = loss_fn().item()
    finally:
        tensor.data[index] = original
    return (plus - minus) / (2.0 * eps)


def _coordinates(
    gradient: np.ndarray,
    samples: int,
    exhaustive: bool,
) -> Iterable[tuple[int, ...]]:
    if exhaustive:
        return np.ndindex(gradient.shape)
    order = np.argsort(-np.abs(gradient), axis=None, kind="stable")
    return (
        tuple(int(i) for i in np.unravel_index(flat, gradient.shape))
        for flat in order[:samples]
    )


def check_gradients(
    name: str,
    loss_fn: LossFn,
    inputs: Sequence[Tensor],
    settings: GradcheckSettings,
    exhaustive: bool = True,
) -> GradcheckRow:
    """Compare autodiff with central differences for ``inputs``.

    Parameters
    ----------
    name
        Row label.

    loss_fn
        Recomputes the scalar loss from the current values of ``inputs``.

    inputs
        64-bit leaves with ``requires_grad``.

    settings
        Step size, tolerance and sampling.

    exhaustive
        Check every coordinate; otherwise the ``settings.samples`` largest
        analytic gradients per tensor, skipping kink crossings.
    """
    with ComputationGraph() as graph:
        loss = loss_fn()
    grads = backward(graph, loss, inputs)
    worst = 0.0
    checked = skipped = 0
    for tensor in inputs:
        analytic = grads[tensor]
        for index in _coordinates(analytic, settings.samples, exhaustive):
            numeric = central_difference(loss_fn, tensor, index, settings.eps)
            error = relative_error(float(analytic[index]), numeric)
            if not exhaustive and error >= settings.tolerance:
                finer = central_difference(
                    loss_fn,
                    tensor,
                    index,
                    settings.eps / 2,
                )
                if relative_error(numeric, finer) >= settings.tolerance:
                    skipped += 1
                    continue
            checked += 1
            worst = max(worst, error)
    return GradcheckRow(name, worst, checked, skipped, settings.tolerance)


def _leaf(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True, dtype=np.float64)


def _away_from(
    values: np.ndarray,
    points: Sequence[float],
    margin: float = KINK_MARGIN,
) -> np.ndarray:
    """Shift values lying within ``margin`` of a kink past it."""
    values = values.copy()
    for point in points:
        near = np.abs(values - point) < margin
        values[near] += 2 * margin
    return values


def _distinct(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Values 0.1 apart in random order, so pooling windows never tie."""
    count = int(np.prod(shape))
    return (rng.permutation(count) * KINK_MARGIN).reshape(shape)


def _projection(
    rng: np.random.Generator,
    shape: tuple[int, ...],
) -> np.ndarray:
    return rng.normal(size=shape)


def _projected(output: Tensor, weights: np.ndarray) -> Tensor:
    """Reduce an output to a scalar with fixed random weights."""
    return (output * Tensor(weights, dtype=np.float64)).sum()


def _binary(build_op: Callable[[Tensor, Tensor], Tensor]):
    def build(rng, _settings):
        x = _leaf(rng.normal(size=(3, 4)))
        magnitude = rng.uniform(0.5, 2.0, size=(4,))
        y = _leaf(magnitude * rng.choice((-1.0, 1.0), size=(4,)))
        weights = _projection(rng, (3, 4))
        return lambda: _projected(build_op(x, y), weights), [x, y]

    return build


def _unary(
    build_op: Callable[[Tensor], Tensor],
    shape: tuple[int, ...],
    sample: Callable[[np.random.Generator, tuple[int, ...]], np.ndarray],
    out_shape: tuple[int, ...] | None = None,
):
    def build(rng, _settings):
        x = _leaf(sample(rng, shape))
        weights = _projection(rng, out_shape or shape)
        return lambda: _projected(build_op(x), weights), [x]

    return build


def _normal(rng, shape):
    return rng.normal(size=shape)


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, size=shape)


def _kernel_shape(spec: ConvSpec) -> tuple[int, ...]:
    return (spec.out_channels, spec.in_channels, *spec.kernel)


def _conv_case(specs: Sequence[ConvSpec], in_shape: tuple[int, ...]):
    def build(rng, _settings):
        x = _leaf(rng.normal(size=in_shape))
        layers = [
            (
                _leaf(rng.normal(size=_kernel_shape(spec))),
                _leaf(rng.normal(size=spec.out_channels)),
            )
            for spec in specs
        ]

        def forward():
            out = x
            for spec, (weights, bias) in zip(specs, layers):
                out = conv_nd(out, weights, bias, spec)
            return out

        projection = _projection(rng, forward().shape)
        inputs = [x, *(t for layer in layers for t in layer)]
        return lambda: _projected(forward(), projection), inputs

    return build


def _maxpool_case(shape: tuple[int, ...], window: tuple[int, ...]):
    def build(rng, _settings):
        x = _leaf(_distinct(rng, shape))
        projection = _projection(rng, maxpool_nd(x, window).shape)
        return lambda: _projected(maxpool_nd(x, window), projection), [x]

    return build


def _batchnorm_case(training: bool):
    def build(rng, _settings):
        channels = 3
        x = _leaf(rng.normal(1.0, 2.0, size=(4, channels, 5, 5)))
        gamma = _leaf(rng.uniform(0.5, 1.5, size=channels))
        beta = _leaf(rng.normal(size=channels))
        state = BatchNormState.for_channels(channels, np.float64)
        if not training:
            state.running_mean[...] = rng.normal(size=channels)
            state.running_var[...] = rng.uniform(0.5, 2.0, size=channels)
        projection = _projection(rng, x.shape)
        return (
            lambda: _projected(
                batchnorm(x, gamma, beta, state, training),
                projection,
            ),
            [x, gamma, beta],
        )

    return build


def _dense_case(rng, _settings):
    x = _leaf(rng.normal(size=(5, 4)))
    weights = _leaf(rng.normal(size=(4, 3)))
    bias = _leaf(rng.normal(size=3))
    projection = _projection(rng, (5, 3))
    return (
        lambda: _projected(dense(x, weights, bias), projection),
        [x, weights, bias],
    )


def _concat_case(rng, _settings):
    x = _leaf(rng.normal(size=(2, 3, 4)))
    y = _leaf(rng.normal(size=(2, 2, 4)))
    projection = _projection(rng, (2, 5, 4))
    return lambda: _projected(concat([x, y], axis=1), projection), [x, y]


def _onehot(rng, shape: tuple[int, ...], classes: int = 3) -> np.ndarray:
    labels = rng.integers(0, classes, size=shape)
    return np.moveaxis(np.eye(classes)[labels], -1, 1)


def _dice_case(variant: str):
    def build(rng, _settings):
        probs = _leaf(rng.uniform(0.1, 0.9, size=(2, 3, 4, 4)))
        onehot = _onehot(rng, (2, 4, 4))
        return (
            lambda: soft_dice_loss(
                probs,
                onehot,
                variant=variant,
                class_axis=1,
            ),
            [probs],
        )

    return build


def _bce_case(rng, _settings):
    probs = _leaf(rng.uniform(0.1, 0.9, size=(6, 1)))
    labels = rng.integers(0, 2, size=6).astype(np.float64)
    return lambda: bce_loss(probs, labels), [probs]


def _mse_case(rng, _settings):
    pred = _leaf(rng.normal(size=(5, 11)))
    target = rng.normal(size=(5, 11))
    return lambda: mse_loss(pred, target), [pred]


@dataclass
class _ReducedProblem:
    images: np.ndarray
    onehot: np.ndarray
    masks: np.ndarray
    targets: np.ndarray
    phases: np.ndarray


def _reduced_problem(
    rng: np.random.Generator,
    settings: GradcheckSettings,
    frames: int = 3,
) -> _ReducedProblem:
    side = settings.size
    return _ReducedProblem(
        images=rng.normal(size=(frames, side, side)),
        onehot=_onehot(rng, (frames, side, side)),
        masks=rng.uniform(0.0, 1.0, size=(frames, 2, side, side)),
        targets=rng.normal(size=(frames, 11)),
        phases=rng.integers(0, 2, size=frames).astype(np.float64),
    )


def _reduced_segmenter(rng, settings, spatial_mode="2d"):
    config = DrUnetConfig(
        base_filters=2,
        depth=2,
        dilations=(1, 2),
        spatial_mode=spatial_mode,
        input_size=settings.size,
    )
    return build_drunet(config, rng, np.float64)


def _reduced_quantifier(rng):
    config = StmtConfig(channels=(2, 3), pool=(1, 2, 2))
    return build_stmt(config, rng, np.float64)


def _quantifier_terms(quantifier, masks: Tensor, problem: _ReducedProblem):
    indices, logits = quantifier(multitask_input(masks))
    return (
        mse_loss(indices[0], problem.targets),
        bce_loss(sigmoid(logits[0]), problem.phases),
    )


def _segmenter_probs(segmenter, problem: _ReducedProblem) -> Tensor:
    return frame_probabilities(
        segmenter,
        segmenter(segmentation_input(segmenter, problem.images)),
    )


def _segmenter_dice_case(spatial_mode: str):
    def build(rng, settings):
        problem = _reduced_problem(rng, settings, frames=2)
        segmenter = _reduced_segmenter(rng, settings, spatial_mode)

        def loss():
            return soft_dice_loss(
                _segmenter_probs(segmenter, problem),
                problem.onehot,
                class_axis=1,
            )

        return loss, list(segmenter.parameters().values())

    return build


def _multitask_case(rng, settings):
    problem = _reduced_problem(rng, settings)
    quantifier = _reduced_quantifier(rng)
    masks = Tensor(problem.masks, dtype=np.float64)
    weights = LossWeights()

    def loss():
        mse, bce = _quantifier_terms(quantifier, masks, problem)
        return multitask_loss(mse, bce, weights)

    return loss, list(quantifier.parameters().values())


def _end_to_end_case(rng, settings):
    problem = _reduced_problem(rng, settings)
    segmenter = _reduced_segmenter(rng, settings)
    quantifier = _reduced_quantifier(rng)
    weights = LossWeights()

    def loss():
        probs = _segmenter_probs(segmenter, problem)
        dice = soft_dice_loss(probs, problem.onehot, weights, class_axis=1)
        mse, bce = _quantifier_terms(quantifier, probs[:, 1:], problem)
        return end_to_end_loss(dice, mse, bce, weights)

    params = [
        *segmenter.parameters().values(),
        *quantifier.parameters().values(),
    ]
    return loss, params


GRADCHECK_CASES = (
    GradcheckCase("add", _binary(lambda x, y: x + y)),
    GradcheckCase("sub", _binary(lambda x, y: x - y)),
    GradcheckCase("mul", _binary(lambda x, y: x * y)),
    GradcheckCase("div", _binary(lambda x, y: x / y)),
    GradcheckCase(
        "sum",
        _unary(lambda x: x.sum(axis=1), (3, 4), _normal, (3,)),
    ),
    GradcheckCase(
        "mean",
        _unary(lambda x: x.mean(axis=(0, 2)), (2, 3, 4), _normal, (3,)),
    ),
    GradcheckCase(
        "reshape",
        _unary(lambda x: x.reshape(4, 3), (3, 4), _normal, (4, 3)),
    ),
    GradcheckCase(
        "transpose",
        _unary(lambda x: x.transpose(2, 0, 1), (2, 3, 4), _normal, (4, 2, 3)),
    ),
    GradcheckCase(
        "slice",
        _unary(lambda x: x[:, 1:3], (3, 4), _normal, (3, 2)),
    ),
    GradcheckCase("concat", _concat_case),
    GradcheckCase("log", _unary(lambda x: x.log(), (3, 4), _positive)),
    GradcheckCase(
        "clip",
        _unary(
            lambda x: x.clip(-0.5, 0.5),
            (3, 4),
            lambda rng, shape: _away_from(
                rng.uniform(-1.0, 1.0, size=shape),
                (-0.5, 0.5),
            ),
        ),
    ),
    GradcheckCase(
        "relu",
        _unary(
            relu,
            (3, 4),
            lambda rng, shape: _away_from(rng.normal(size=shape), (0.0,)),
        ),
    ),
    GradcheckCase("sigmoid", _unary(sigmoid, (3, 4), _normal)),
    GradcheckCase("softmax", _unary(softmax, (2, 3, 4, 4), _normal)),
    GradcheckCase(
        "conv2d",
        _conv_case(
            [ConvSpec((3, 3), 2, 3, stride=(1, 2), dilation=(2, 1))],
            (2, 2, 7, 7),
        ),
    ),
    GradcheckCase(
        "conv2d_valid",
        _conv_case([ConvSpec((2, 3), 2, 2, padding="valid")], (1, 2, 5, 6)),
    ),
    GradcheckCase(
        "conv3d_factorized",
        _conv_case(
            [
                ConvSpec((3, 1, 1), 2, 3),
                ConvSpec((1, 3, 3), 3, 2, dilation=(1, 2, 2)),
            ],
            (1, 2, 4, 6, 6),
        ),
    ),
    GradcheckCase("maxpool2d", _maxpool_case((1, 2, 6, 6), (2, 2))),
    GradcheckCase("maxpool3d", _maxpool_case((1, 1, 3, 6, 6), (1, 3, 3))),
    GradcheckCase("batchnorm_train", _batchnorm_case(training=True)),
    GradcheckCase("batchnorm_infer", _batchnorm_case(training=False)),
    GradcheckCase("dense", _dense_case),
    GradcheckCase(
        "upsample",
        _unary(
            lambda x: upsample_nearest(x, (1, 2, 2)),
            (1, 2, 2, 3, 3),
            _normal,
            (1, 2, 2, 6, 6),
        ),
    ),
    GradcheckCase("soft_dice_verbatim", _dice_case("verbatim")),
    GradcheckCase("soft_dice_canonical", _dice_case("canonical")),
    GradcheckCase("bce", _bce_case),
    GradcheckCase("mse", _mse_case),
    GradcheckCase(
        "drunet_dice",
        _segmenter_dice_case("2d"),
        exhaustive=False,
    ),
    GradcheckCase(
        "drunet3d_dice",
        _segmenter_dice_case("3d"),
        exhaustive=False,
    ),
    GradcheckCase("multitask_loss", _multitask_case, exhaustive=False),
    GradcheckCase("end_to_end_loss", _end_to_end_case, exhaustive=False),
)


def run_gradcheck_suite(
    settings: GradcheckSettings | None = None,
    cases: Sequence[GradcheckCase] = GRADCHECK_CASES,
) -> list[GradcheckRow]:
    """Run every case and return one row per case.

    Each case draws from its own generator seeded by ``(seed, position)``,
    so rows do not depend on which other cases run.
    """
    settings = settings or GradcheckSettings()
    rows = []
    for position, case in enumerate(cases):
        rng = np.random.default_rng([settings.seed, position])
        loss_fn, inputs = case.build(rng, settings)
        row = check_gradients(
            case.name,
            loss_fn,
            inputs,
            settings,
            exhaustive=case.exhaustive,
        )
        logger.info(
            "gradcheck %s: max relative error %.3g over %d coordinates "
            "(%d skipped)",
            row.op,
            row.max_relative_error,
            row.checked,
            row.skipped,
        )
        rows.append(row)
    return rows


def render_table(rows: Sequence[GradcheckRow]) -> str:
    """Fixed-width pass/fail table."""
    width = max(len("op"), *(len(row.op) for row in rows))
    lines = [f"{'op':<{width}}  max_rel_error  checked  result"]
    for row in rows:
        result = "PASS" if row.passed else "FAIL"
        lines.append(
            f"{row.op:<{width}}  {row.max_relative_error:13.3e}  "
            f"{row.checked:7d}  {result}",
        )
    return "\n".join(lines) + "\n"


def write_gradcheck(
    path: os.PathLike[str] | str,
    rows: Sequence[GradcheckRow],
):
    """Write the suite outcome as CSV."""
    write_csv(path, GRADCHECK_HEADER, (row.as_row() for row in rows))


def ensure_passed(rows: Sequence[GradcheckRow]):
    """Raise GradcheckFailure naming every failed case."""
    failed = [row.op for row in rows if not row.passed]
    if failed:
        msg = f"Gradient check failed for: {', '.join(failed)}"
        raise GradcheckFailure(msg)


class GradcheckFailure(Exception):
    """Exception raised when autodiff and finite differences disagree."""
