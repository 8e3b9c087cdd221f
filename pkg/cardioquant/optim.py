"""Adam with L2 weight decay."""
from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from cardioquant.tensor import Tensor


@dataclass
class AdamState:
    """Hyperparameters and per-parameter moments of one optimiser.

    Moments are keyed by parameter name and created on the first step.
    """

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        """Validate hyperparameters."""
        if self.lr <= 0 or self.epsilon <= 0 or self.weight_decay < 0:
            msg = "lr and epsilon must be > 0, weight_decay >= 0"
            raise OptimizerError(msg)
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            msg = f"Betas must lie in [0, 1): {self.beta1}, {self.beta2}"
            raise OptimizerError(msg)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
) -> Mapping[str, Tensor]:
    """Apply one bias-corrected Adam update in place.

    The L2 term ``weight_decay * param`` is added to each gradient before
    the moments are updated.

    Raises
    ------
    OptimizerError
        Naming the first parameter whose gradient is missing, mis-shaped or
        not finite. No parameter is changed in that case.
    """
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None or np.shape(grad) != param.shape:
            msg = f"Missing or mis-shaped gradient for parameter {name}"
            raise OptimizerError(msg)
        if not np.all(np.isfinite(grad)):
            msg = f"Non-finite gradient for parameter {name}"
            raise OptimizerError(msg)

    state.step += 1
    correction1 = 1 - state.beta1**state.step
    correction2 = 1 - state.beta2**state.step
    for name, param in params.items():
        grad = np.asarray(grads[name], dtype=np.float64)
        if state.weight_decay:
            grad = grad + state.weight_decay * param.data
        first = state.first_moments.get(name, np.zeros(param.shape))
        second = state.second_moments.get(name, np.zeros(param.shape))
        first = state.beta1 * first + (1 - state.beta1) * grad
        second = state.beta2 * second + (1 - state.beta2) * grad * grad
        state.first_moments[name] = first
        state.second_moments[name] = second
        update = (first / correction1) / (
            np.sqrt(second / correction2) + state.epsilon
        )
        param.data[...] = param.data - state.lr * update
    return params


class OptimizerError(Exception):
    """Exception raised when an optimiser step cannot be applied."""
