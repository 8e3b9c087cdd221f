"""Agreement metrics between predictions and ground truth."""
from __future__ import annotations

from collections.abc import Sequence

import numpy as np
from scipy.spatial.distance import directed_hausdorff

LOA_FACTOR = 1.96


def _paired(
    pred: Sequence[float] | np.ndarray,
    truth: Sequence[float] | np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64).ravel()
    truth = np.asarray(truth, dtype=np.float64).ravel()
    if pred.shape != truth.shape:
        msg = f"Series lengths differ: {pred.size} vs {truth.size}"
        raise MetricError(msg)
    if pred.size == 0:
        msg = "Metrics need at least one value"
        raise MetricError(msg)
    return pred, truth


def mae(pred, truth) -> float:
    """Mean absolute error."""
    pred, truth = _paired(pred, truth)
    return float(np.mean(np.abs(pred - truth)))


def mae_std(pred, truth) -> tuple[float, float]:
    """Mean and population standard deviation of the absolute error."""
    pred, truth = _paired(pred, truth)
    errors = np.abs(pred - truth)
    return float(errors.mean()), float(errors.std())


def pcc(pred, truth) -> float:
    """Pearson correlation coefficient.

    Raises
    ------
    MetricError
        If fewer than two values are given or either series is constant.
    """
    pred, truth = _paired(pred, truth)
    if pred.size < 2:  # noqa: PLR2004
        msg = "PCC needs at least two values"
        raise MetricError(msg)
    dp = pred - pred.mean()
    dt = truth - truth.mean()
    denominator = np.sqrt(np.sum(dp * dp) * np.sum(dt * dt))
    if denominator == 0:
        msg = "PCC is undefined for a constant series"
        raise MetricError(msg)
    return float(np.clip(np.sum(dp * dt) / denominator, -1.0, 1.0))


def error_rate(pred, truth) -> float:
    """Percentage of frames whose phase label is wrong."""
    pred, truth = _paired(pred, truth)
    return float(100.0 * np.mean(pred != truth))


def dice_score(pred: np.ndarray, truth: np.ndarray, label: int) -> float:
    """``2|A & B| / (|A| + |B|)`` for one label; 1 when both are empty."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        msg = f"Mask shapes differ: {pred.shape} vs {truth.shape}"
        raise MetricError(msg)
    a = pred == label
    b = truth == label
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


def hausdorff(
    pred: np.ndarray,
    truth: np.ndarray,
    label: int,
    pixel_spacing: float = 1.0,
) -> float:
    """Symmetric Hausdorff distance (mm) between pixel centres of a label.

    Raises
    ------
    MetricError
        If exactly one of the two masks lacks the label.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        msg = f"Mask shapes differ: {pred.shape} vs {truth.shape}"
        raise MetricError(msg)
    a = np.argwhere(pred == label).astype(np.float64)
    b = np.argwhere(truth == label).astype(np.float64)
    if a.size == 0 and b.size == 0:
        return 0.0
    if a.size == 0 or b.size == 0:
        msg = f"Hausdorff distance undefined: label {label} is one-sided"
        raise MetricError(msg)
    distance = max(directed_hausdorff(a, b)[0], directed_hausdorff(b, a)[0])
    return float(distance) * pixel_spacing


def bland_altman(pred, truth) -> tuple[float, float, float]:
    """Bias and 95% limits of agreement (population std)."""
    pred, truth = _paired(pred, truth)
    if pred.size < 2:  # noqa: PLR2004
        msg = "Bland-Altman analysis needs at least two values"
        raise MetricError(msg)
    differences = pred - truth
    bias = float(differences.mean())
    spread = LOA_FACTOR * float(differences.std())
    return bias, bias - spread, bias + spread


class MetricError(Exception):
    """Exception raised when a metric is undefined for its inputs."""
