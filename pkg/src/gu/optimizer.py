"""Base optimizers, including the adaptive state the metric binds to."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .metric import DiagonalMetric, metric_from_second_moments

__all__ = [
    "NonFiniteGradientError",
    "AdaptiveState",
    "sgd_step",
    "adaptive_step",
    "update_moments",
    "snapshot_metric",
]


class NonFiniteGradientError(ValueError):
    pass


def sgd_step(theta, gradient, learning_rate: float) -> np.ndarray:
    if not learning_rate > 0.0:
        raise ValueError("learning_rate must be > 0")
    t = np.asarray(theta, dtype=np.float64)
    g = np.asarray(gradient, dtype=np.float64)
    if t.shape != g.shape:
        raise ValueError("theta and gradient must share a shape")
    return t - learning_rate * g


@dataclass(frozen=True)
class AdaptiveState:
    """Adam-style moment state.

    The second-moment accumulator is what the metric module reads; whether
    it is bias-corrected before whitening is controlled by
    ``bias_corrected_metric`` (the parameter update itself always uses the
    standard bias-corrected moments).
    """

    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int
    beta1: float = 0.9
    beta2: float = 0.999
    learning_rate: float = 1e-3
    epsilon: float = 1e-8
    bias_corrected_metric: bool = True

    def __post_init__(self):
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ValueError("decay rates must lie in [0, 1)")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be > 0")
        if not self.epsilon > 0.0:
            raise ValueError("epsilon must be > 0")
        if np.any(self.second_moment < 0.0):
            raise ValueError("second moments must be nonnegative")

    @classmethod
    def init(cls, dim: int, learning_rate: float = 1e-3, beta1: float = 0.9,
             beta2: float = 0.999, epsilon: float = 1e-8,
             bias_corrected_metric: bool = True) -> "AdaptiveState":
        return cls(
            first_moment=np.zeros(dim),
            second_moment=np.zeros(dim),
            step_count=0,
            beta1=beta1,
            beta2=beta2,
            learning_rate=learning_rate,
            epsilon=epsilon,
            bias_corrected_metric=bias_corrected_metric,
        )


def update_moments(state: AdaptiveState, gradient) -> AdaptiveState:
    """Advance the moment EMAs without moving any parameters.

    Used when an external rule takes the parameter step but the metric must
    still track the squared-gradient scale.
    """
    g = np.asarray(gradient, dtype=np.float64)
    if g.shape != state.second_moment.shape:
        raise ValueError("gradient dimension does not match the state")
    if not np.all(np.isfinite(g)):
        raise NonFiniteGradientError("gradient contains non-finite entries")
    return replace(
        state,
        first_moment=state.beta1 * state.first_moment + (1.0 - state.beta1) * g,
        second_moment=state.beta2 * state.second_moment + (1.0 - state.beta2) * g * g,
        step_count=state.step_count + 1,
    )


def adaptive_step(state: AdaptiveState, theta, gradient) -> tuple[np.ndarray, AdaptiveState]:
    """One bias-corrected adaptive update; returns the new parameters and state.

    A non-finite gradient raises and leaves the passed-in state untouched.
    """
    t = np.asarray(theta, dtype=np.float64)
    new_state = update_moments(state, gradient)
    tcount = new_state.step_count
    m_hat = new_state.first_moment / (1.0 - state.beta1 ** tcount)
    v_hat = new_state.second_moment / (1.0 - state.beta2 ** tcount)
    theta_new = t - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return theta_new, new_state


def snapshot_metric(state: AdaptiveState) -> DiagonalMetric:
    """Freeze the optimizer-induced metric at the current second moments.

    The snapshot is immutable; later optimizer steps do not affect it.  With
    a fresh state (all-zero accumulator) every diagonal entry is
    ``1 / epsilon``.
    """
    v = state.second_moment
    if state.bias_corrected_metric and state.step_count >= 1:
        v = v / (1.0 - state.beta2 ** state.step_count)
    return metric_from_second_moments(v.copy(), state.epsilon)
