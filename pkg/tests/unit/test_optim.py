"""Unit tests of the Adam optimiser."""

import numpy as np
import pytest

from cardioquant.optim import AdamState, OptimizerError, adam_step
from cardioquant.tensor import Tensor


def _params(*values):
    return {
        f"p{index}": Tensor(value, requires_grad=True, dtype=np.float64)
        for index, value in enumerate(values)
    }


def test_first_step_moves_by_learning_rate():
    """Bias correction makes the first step exactly lr * sign(grad)."""
    params = _params([1.0, -1.0])
    state = AdamState(lr=0.1)
    adam_step(params, {"p0": np.array([3.0, -0.5])}, state)
    np.testing.assert_allclose(params["p0"].data, [0.9, -0.9], atol=1e-6)
    assert state.step == 1


def test_zero_gradient_leaves_parameters():
    """No gradient and no decay means no movement."""
    params = _params([1.0, 2.0])
    adam_step(params, {"p0": np.zeros(2)}, AdamState(lr=0.1))
    np.testing.assert_array_equal(params["p0"].data, [1.0, 2.0])


def test_weight_decay_pulls_towards_zero():
    """L2 decay alone shrinks the parameters."""
    params = _params([2.0, -2.0])
    adam_step(params, {"p0": np.zeros(2)}, AdamState(lr=0.1, weight_decay=0.5))
    np.testing.assert_allclose(params["p0"].data, [1.9, -1.9], atol=1e-6)


def test_moments_mirror_parameter_shapes():
    """Moment arrays are created per parameter with its shape."""
    params = _params(np.ones((2, 3)), np.ones(4))
    state = AdamState(lr=0.01)
    grads = {"p0": np.ones((2, 3)), "p1": np.ones(4)}
    adam_step(params, grads, state)
    adam_step(params, grads, state)
    assert state.step == 2
    assert state.first_moments["p0"].shape == (2, 3)
    assert state.second_moments["p1"].shape == (4,)


def test_minimises_a_quadratic():
    """Repeated steps approach the minimum of (x - 3)^2."""
    params = _params([0.0])
    state = AdamState(lr=0.1)
    for _ in range(300):
        grad = 2 * (params["p0"].data - 3.0)
        adam_step(params, {"p0": grad}, state)
    assert abs(params["p0"].data[0] - 3.0) < 0.05


def test_nan_gradient_names_parameter_and_changes_nothing():
    """A non-finite gradient aborts before any update."""
    params = _params([1.0], [2.0])
    state = AdamState(lr=0.1)
    with pytest.raises(OptimizerError, match="p1"):
        adam_step(params, {"p0": np.ones(1), "p1": np.array([np.nan])}, state)
    assert params["p0"].data[0] == 1.0
    assert state.step == 0


def test_missing_gradient():
    """Every parameter needs a gradient of its shape."""
    with pytest.raises(OptimizerError, match="p0"):
        adam_step(_params([1.0, 2.0]), {"p0": np.ones(3)}, AdamState(lr=0.1))


def test_invalid_hyperparameters():
    """Betas must lie in [0, 1) and lr must be positive."""
    with pytest.raises(OptimizerError):
        AdamState(lr=0.0)
    with pytest.raises(OptimizerError):
        AdamState(lr=0.1, beta2=1.0)
