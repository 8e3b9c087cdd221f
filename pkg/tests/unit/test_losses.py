"""Unit tests of the segmentation, regression and phase objectives."""

import math

import numpy as np
import pytest

from cardioquant.losses import (
    LossInputError,
    LossWeights,
    bce_loss,
    end_to_end_loss,
    mse_loss,
    multitask_loss,
    soft_dice_loss,
)
from cardioquant.tensor import ComputationGraph, Tensor, backward


def _onehot(labels, classes=3):
    return np.eye(classes)[np.asarray(labels)]


@pytest.fixture()
def labels():
    """A small label map using every class."""
    return np.array([[0, 1, 1], [2, 2, 0], [1, 0, 2]])


def test_verbatim_dice_of_perfect_prediction(labels):
    """Each class ratio is 1/2, so a perfect prediction scores 5/6."""
    onehot = _onehot(labels)
    loss = soft_dice_loss(onehot, onehot, variant="verbatim")
    assert math.isclose(loss.item(), 1 - 0.5 / 3, abs_tol=1e-6)


def test_canonical_dice_of_perfect_prediction(labels):
    """The 2I form vanishes on a perfect prediction."""
    onehot = _onehot(labels)
    loss = soft_dice_loss(onehot, onehot, variant="canonical")
    assert abs(loss.item()) < 1e-6


def test_dice_default_variant_is_verbatim(labels):
    """LossWeights selects the verbatim form unless told otherwise."""
    onehot = _onehot(labels)
    assert math.isclose(
        soft_dice_loss(onehot, onehot).item(),
        soft_dice_loss(onehot, onehot, variant="verbatim").item(),
    )


def test_dice_worsens_with_wrong_prediction(labels):
    """Predicting the wrong class everywhere raises the loss."""
    onehot = _onehot(labels)
    wrong = _onehot((labels + 1) % 3)
    assert (
        soft_dice_loss(wrong, onehot, variant="canonical").item()
        > soft_dice_loss(onehot, onehot, variant="canonical").item()
    )


def test_dice_rejects_probabilities_outside_unit_interval(labels):
    """Values above one are not probabilities."""
    onehot = _onehot(labels)
    with pytest.raises(LossInputError):
        soft_dice_loss(onehot * 1.5, onehot)


def test_dice_rejects_soft_ground_truth(labels):
    """The reference must be exactly one-hot."""
    onehot = _onehot(labels)
    with pytest.raises(LossInputError, match="one-hot"):
        soft_dice_loss(onehot, onehot * 0.5)


def test_dice_rejects_shape_mismatch(labels):
    """Prediction and reference shapes must agree."""
    onehot = _onehot(labels)
    with pytest.raises(LossInputError):
        soft_dice_loss(onehot[:2], onehot)


def test_dice_rejects_wrong_number_of_class_weights(labels):
    """One weight per class."""
    onehot = _onehot(labels.clip(0, 1), classes=2)
    with pytest.raises(LossInputError, match="class weights"):
        soft_dice_loss(onehot, onehot)


def test_bce_of_half_is_log_two():
    """P(ED) = 0.5 costs ln 2 whatever the label."""
    loss = bce_loss(np.full(4, 0.5), [1, 0, 1, 0])
    assert math.isclose(loss.item(), math.log(2), rel_tol=1e-6)


def test_bce_is_finite_at_saturated_probabilities():
    """Clamping keeps confident mistakes finite."""
    loss = bce_loss(np.array([0.0, 1.0]), [1, 0])
    assert math.isfinite(loss.item())
    assert loss.item() > 10


def test_bce_rejects_non_binary_labels():
    """Phase labels are 0 or 1."""
    with pytest.raises(LossInputError):
        bce_loss(np.full(2, 0.5), [0.5, 1])


def test_mse_matches_mean_square():
    """MSE averages over frames and indices."""
    pred = np.array([[1.0, 2.0], [3.0, 4.0]])
    target = np.zeros((2, 2))
    assert math.isclose(mse_loss(pred, target).item(), 7.5)


def test_mse_rejects_shape_mismatch():
    """Prediction and target shapes must agree."""
    with pytest.raises(LossInputError):
        mse_loss(np.zeros((2, 11)), np.zeros((2, 10)))


def test_multitask_composition():
    """Default weights give MSE + 4 BCE."""
    assert math.isclose(multitask_loss(0.5, 0.25), 0.5 + 4 * 0.25)


def test_end_to_end_composition():
    """Default weights give 10 Dice + MSE + BCE."""
    assert math.isclose(end_to_end_loss(0.1, 0.5, 0.25), 1.0 + 0.5 + 0.25)


def test_custom_weights():
    """Task weights come from LossWeights."""
    weights = LossWeights(multistage=(2.0, 0.0))
    assert math.isclose(multitask_loss(0.5, 100.0, weights), 1.0)


def test_negative_weights_refused():
    """Weights must be non-negative."""
    with pytest.raises(LossInputError):
        LossWeights(class_weights=(0.2, -0.3, 0.5))


def test_dice_gradient_flows_to_probabilities(labels):
    """The loss is differentiable in the predicted probabilities."""
    onehot = _onehot(labels)
    probs = Tensor(np.full(onehot.shape, 1 / 3), requires_grad=True)
    with ComputationGraph() as graph:
        loss = soft_dice_loss(probs, onehot)
    backward(graph, loss)
    assert np.any(probs.grad != 0)


@pytest.mark.parametrize("variant", ["verbatim", "canonical"])
def test_dice_is_smallest_at_ground_truth(labels, variant):
    """Mixing the one-hot map with other distributions never lowers Dice."""
    onehot = _onehot(labels)
    best = soft_dice_loss(onehot, onehot, variant=variant).item()
    rng = np.random.default_rng(7)
    for _ in range(20):
        noise = rng.dirichlet(np.ones(3), size=labels.shape)
        mix = rng.uniform(0.05, 0.5)
        probs = (1 - mix) * onehot + mix * noise
        loss = soft_dice_loss(probs, onehot, variant=variant).item()
        assert loss >= best - 1e-6


def test_losses_ignore_sample_order():
    """Reordering samples leaves every loss unchanged."""
    rng = np.random.default_rng(8)
    order = rng.permutation(5)
    probs = rng.dirichlet(np.ones(3), size=(5, 4, 4))
    onehot = _onehot(rng.integers(0, 3, size=(5, 4, 4)))
    assert soft_dice_loss(probs, onehot).item() == pytest.approx(
        soft_dice_loss(probs[order], onehot[order]).item(),
    )
    pred, target = rng.normal(size=(5, 11)), rng.normal(size=(5, 11))
    assert mse_loss(pred, target).item() == pytest.approx(
        mse_loss(pred[order], target[order]).item(),
    )
    phase_probs = rng.uniform(0.1, 0.9, size=5)
    phases = rng.integers(0, 2, size=5)
    assert bce_loss(phase_probs, phases).item() == pytest.approx(
        bce_loss(phase_probs[order], phases[order]).item(),
    )
