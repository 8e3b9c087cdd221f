"""Training objectives for the segmentation and multi-task networks."""
from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np

from cardioquant.tensor import Tensor

DICE_VARIANTS = ("verbatim", "canonical")
DICE_SMOOTHING = 1e-6
BCE_CLAMP = 1e-7
PROBABILITY_TOLERANCE = 1e-6


@dataclass(frozen=True)
class LossWeights:
    """Class and task weights of every objective.

    Attributes
    ----------
    class_weights
        Dice weight per class index (background, cavity, myocardium).

    multistage
        ``(mse, bce)`` weights of the multi-task objective.

    end_to_end
        ``(dice, mse, bce)`` weights of the joint objective.

    dice_variant
        ``"verbatim"`` or ``"canonical"`` soft Dice.
    """

    class_weights: tuple[float, ...] = (0.2, 0.3, 0.5)
    multistage: tuple[float, float] = (1.0, 4.0)
    end_to_end: tuple[float, float, float] = (10.0, 1.0, 1.0)
    dice_variant: str = "verbatim"

    def __post_init__(self):
        """Reject negative weights and unknown variants."""
        for name in ("class_weights", "multistage", "end_to_end"):
            values = getattr(self, name)
            if any(value < 0 for value in values):
                msg = f"{name} must be non-negative, got {values}"
                raise LossInputError(msg)
        if len(self.multistage) != 2 or len(self.end_to_end) != 3:  # noqa: PLR2004
            msg = "multistage needs 2 weights and end_to_end needs 3"
            raise LossInputError(msg)
        if self.dice_variant not in DICE_VARIANTS:
            msg = f"dice_variant must be one of {DICE_VARIANTS}"
            raise LossInputError(msg)


def _as_tensor(value: Tensor | np.ndarray) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def soft_dice_loss(
    probs: Tensor | np.ndarray,
    onehot: np.ndarray,
    weights: LossWeights | None = None,
    variant: str | None = None,
    class_axis: int = -1,
) -> Tensor:
    """Weighted multi-class soft Dice loss.

    Parameters
    ----------
    probs
        Class probabilities, classes along ``class_axis``.

    onehot
        Exact one-hot ground truth of the same shape.

    weights
        Class weights; defaults to ``LossWeights()``.

    variant
        ``"verbatim"``: ``1 - (1/K) sum_k w_k (I_k + s) / (Y_k + P_k + s)``.
        ``"canonical"``: ``1 - sum_k w_k (2 I_k + s) / (Y_k + P_k + s)``.
        Defaults to ``weights.dice_variant``.

    class_axis
        Axis holding the classes.

    Returns
    -------
    Tensor
        Scalar loss on the active graph.

    Raises
    ------
    LossInputError
        If probabilities leave [0, 1], the ground truth is not one-hot or
        the shapes disagree.
    """
    weights = weights or LossWeights()
    variant = variant or weights.dice_variant
    if variant not in DICE_VARIANTS:
        msg = f"Unknown Dice variant {variant!r}"
        raise LossInputError(msg)
    probs = _as_tensor(probs)
    truth = np.asarray(onehot)
    if truth.shape != probs.shape:
        msg = f"Prediction {probs.shape} and ground truth {truth.shape} differ"
        raise LossInputError(msg)
    values = probs.data
    if np.any(values < -PROBABILITY_TOLERANCE) or np.any(
        values > 1 + PROBABILITY_TOLERANCE,
    ):
        msg = "Probabilities must lie in [0, 1]"
        raise LossInputError(msg)
    axis = class_axis % probs.ndim
    if not (
        np.all((truth == 0) | (truth == 1))
        and np.all(truth.sum(axis=axis) == 1)
    ):
        msg = "Ground truth is not one-hot along the class axis"
        raise LossInputError(msg)
    classes = probs.shape[axis]
    if len(weights.class_weights) != classes:
        msg = (
            f"{len(weights.class_weights)} class weights for {classes} "
            "classes"
        )
        raise LossInputError(msg)

    others = tuple(ax for ax in range(probs.ndim) if ax != axis)
    target = Tensor(truth, dtype=probs.dtype)
    class_weights = Tensor(
        np.asarray(weights.class_weights),
        dtype=probs.dtype,
    )
    intersection = (probs * target).sum(axis=others)
    denominator = target.sum(axis=others) + probs.sum(axis=others)
    if variant == "verbatim":
        ratio = (intersection + DICE_SMOOTHING) / (
            denominator + DICE_SMOOTHING
        )
        return 1.0 - (class_weights * ratio).sum() * (1.0 / classes)
    ratio = (intersection * 2.0 + DICE_SMOOTHING) / (
        denominator + DICE_SMOOTHING
    )
    return 1.0 - (class_weights * ratio).sum()


def bce_loss(
    probs: Tensor | np.ndarray,
    labels: np.ndarray | Sequence[float],
) -> Tensor:
    """Mean binary cross-entropy of per-sample P(ED) against 0/1 labels.

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` first.
    """
    probs = _as_tensor(probs)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.size != probs.data.size:
        msg = f"{labels.size} labels for {probs.data.size} probabilities"
        raise LossInputError(msg)
    if not np.all((labels == 0) | (labels == 1)):
        msg = "Phase labels must be 0 or 1"
        raise LossInputError(msg)
    target = Tensor(labels.reshape(probs.shape), dtype=probs.dtype)
    clamped = probs.clip(BCE_CLAMP, 1.0 - BCE_CLAMP)
    log_likelihood = target * clamped.log() + (1.0 - target) * (
        1.0 - clamped
    ).log()
    return -log_likelihood.mean()


def mse_loss(pred: Tensor | np.ndarray, target: np.ndarray) -> Tensor:
    """Mean over frames and indices of the squared difference."""
    pred = _as_tensor(pred)
    target = np.asarray(target)
    if pred.shape != target.shape:
        msg = f"Prediction {pred.shape} and target {target.shape} differ"
        raise LossInputError(msg)
    difference = pred - Tensor(target, dtype=pred.dtype)
    return (difference * difference).mean()


def _weighted_sum(
    terms: Sequence[Tensor | float],
    lambdas: Sequence[float],
) -> Any:
    total = None
    for term, weight in zip(terms, lambdas):
        scaled = term * float(weight)
        total = scaled if total is None else total + scaled
    return total


def multitask_loss(
    mse: Tensor | float,
    bce: Tensor | float,
    weights: LossWeights | None = None,
) -> Any:
    """``l1 * MSE + l2 * BCE`` with the multi-stage weights."""
    weights = weights or LossWeights()
    return _weighted_sum((mse, bce), weights.multistage)


def end_to_end_loss(
    seg_loss: Tensor | float,
    mse: Tensor | float,
    bce: Tensor | float,
    weights: LossWeights | None = None,
) -> Any:
    """``l1 * Dice + l2 * MSE + l3 * BCE`` with the joint weights."""
    weights = weights or LossWeights()
    return _weighted_sum((seg_loss, mse, bce), weights.end_to_end)


class LossInputError(Exception):
    """Exception raised when loss inputs violate their contract."""
