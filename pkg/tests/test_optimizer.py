import numpy as np
import pytest

from gu.metric import identity_metric, whiten
from gu.optimizer import (
    AdaptiveState,
    NonFiniteGradientError,
    adaptive_step,
    sgd_step,
    snapshot_metric,
    update_moments,
)
from gu.step import GradientBundle, GUConfig, compose_gu_direction
from gu.subspace import RetainBasis


def reference_adam(theta, grads, lr, beta1, beta2, eps):
    """Independent loop-based implementation of the same recurrences."""
    theta = np.array(theta, dtype=np.float64)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    out = []
    for t, g in enumerate(grads, start=1):
        for i in range(theta.shape[0]):
            m[i] = beta1 * m[i] + (1 - beta1) * g[i]
            v[i] = beta2 * v[i] + (1 - beta2) * g[i] * g[i]
        for i in range(theta.shape[0]):
            mh = m[i] / (1 - beta1 ** t)
            vh = v[i] / (1 - beta2 ** t)
            theta[i] = theta[i] - lr * mh / (np.sqrt(vh) + eps)
        out.append(theta.copy())
    return out


class TestSgd:
    def test_zero_gradient_keeps_theta(self):
        theta = np.array([1.0, 2.0])
        assert np.array_equal(sgd_step(theta, np.zeros(2), 0.1), theta)

    def test_hand_example(self):
        assert sgd_step(np.array([1.0]), np.array([2.0]), 0.5)[0] == 0.0

    def test_formula(self):
        rng = np.random.default_rng(0)
        theta = rng.normal(size=6)
        g = rng.normal(size=6)
        assert np.array_equal(sgd_step(theta, g, 0.3), theta - 0.3 * g)

    def test_invalid_learning_rate(self):
        with pytest.raises(ValueError):
            sgd_step(np.zeros(2), np.zeros(2), 0.0)


class TestAdaptive:
    def test_first_step_expansion(self):
        state = AdaptiveState.init(3, learning_rate=0.1)
        theta = np.zeros(3)
        g = np.array([1.0, -2.0, 0.5])
        theta2, state2 = adaptive_step(state, theta, g)
        expected = -0.1 * g / (np.abs(g) + state.epsilon)
        assert np.allclose(theta2, expected, rtol=1e-15)
        assert state2.step_count == 1
        m_hat = state2.first_moment / (1 - state.beta1)
        v_hat = state2.second_moment / (1 - state.beta2)
        assert np.allclose(m_hat, g, rtol=1e-15)
        assert np.allclose(v_hat, g * g, rtol=1e-15)

    def test_zero_gradient_stream(self):
        state = AdaptiveState.init(2, learning_rate=0.1)
        theta = np.array([1.0, -1.0])
        _, state = adaptive_step(state, theta, np.array([1.0, 1.0]))
        theta_ref = theta.copy()
        for _ in range(50):
            theta, state = adaptive_step(state, theta, np.zeros(2))
        # moments decay toward zero and theta only drifts by the
        # vanishing momentum tail
        assert np.all(state.second_moment < 0.95)
        assert np.max(np.abs(state.first_moment)) < 1e-2

    def test_matches_independent_reference_100_steps(self):
        rng = np.random.default_rng(5)
        grads = [rng.normal(size=4) for _ in range(100)]
        theta0 = rng.normal(size=4)
        lr, b1, b2, eps = 0.05, 0.9, 0.999, 1e-8
        expected = reference_adam(theta0, grads, lr, b1, b2, eps)
        state = AdaptiveState.init(4, learning_rate=lr, beta1=b1, beta2=b2,
                                   epsilon=eps)
        theta = theta0.copy()
        for g, want in zip(grads, expected):
            theta, state = adaptive_step(state, theta, g)
            assert np.max(np.abs(theta - want)) <= 1e-12 * max(
                1.0, np.max(np.abs(want)))

    def test_degenerates_to_scaled_sgd(self):
        # beta1 = beta2 = 0 with a dominating epsilon reduces the update to
        # (lr / eps) * g up to a |g| / eps relative correction
        rng = np.random.default_rng(7)
        eps = 1e8
        lr = 1.0
        state = AdaptiveState.init(3, learning_rate=lr, beta1=0.0, beta2=0.0,
                                   epsilon=eps)
        theta_a = rng.normal(size=3)
        theta_b = theta_a.copy()
        for _ in range(20):
            g = theta_a * 0.5  # quadratic gradient
            theta_a, state = adaptive_step(state, theta_a, g)
            theta_b = sgd_step(theta_b, theta_b * 0.5, lr / eps)
            assert np.max(np.abs(theta_a - theta_b)) <= 1e-6 * np.max(
                np.abs(theta_b))

    def test_nonfinite_gradient_leaves_state(self):
        state = AdaptiveState.init(2)
        with pytest.raises(NonFiniteGradientError):
            adaptive_step(state, np.zeros(2), np.array([np.inf, 0.0]))
        assert state.step_count == 0
        assert np.array_equal(state.second_moment, np.zeros(2))


class TestSnapshot:
    def test_fresh_state_gives_inverse_epsilon(self):
        state = AdaptiveState.init(4, epsilon=1e-2)
        m = snapshot_metric(state)
        assert np.allclose(m.diag_h, 100.0 * np.ones(4), rtol=1e-12)

    def test_constant_gradient_fixed_point(self):
        # with v0 = 0 and a constant gradient the bias-corrected second
        # moment equals g^2 exactly at every step
        g = np.array([0.5, -2.0, 1.0])
        state = AdaptiveState.init(3, epsilon=1e-8)
        theta = np.zeros(3)
        for t in range(1, 30):
            theta, state = adaptive_step(state, theta, g)
            m = snapshot_metric(state)
            assert np.allclose(m.diag_h, 1.0 / (g * g + state.epsilon),
                               rtol=1e-12)

    def test_snapshot_immutable_after_later_steps(self):
        rng = np.random.default_rng(9)
        state = AdaptiveState.init(3)
        theta = np.zeros(3)
        theta, state = adaptive_step(state, theta, rng.normal(size=3))
        snap = snapshot_metric(state)
        frozen = snap.diag_h.copy()
        for _ in range(5):
            theta, state = adaptive_step(state, theta, rng.normal(size=3))
        assert np.array_equal(snap.diag_h, frozen)

    def test_raw_accumulator_mode(self):
        g = np.array([2.0])
        state = AdaptiveState.init(1, bias_corrected_metric=False)
        _, state = adaptive_step(state, np.zeros(1), g)
        raw = snapshot_metric(state)
        corrected = snapshot_metric(
            AdaptiveState(first_moment=state.first_moment,
                          second_moment=state.second_moment,
                          step_count=state.step_count,
                          learning_rate=state.learning_rate))
        # raw accumulator is (1 - beta2) * g^2 after one step, much smaller
        assert raw.diag_h[0] > corrected.diag_h[0]

    def test_update_moments_only(self):
        state = AdaptiveState.init(2)
        g = np.array([1.0, 2.0])
        state2 = update_moments(state, g)
        assert state2.step_count == 1
        assert np.allclose(state2.second_moment, (1 - state.beta2) * g * g)


class TestMetricFreshnessContract:
    def test_report_quantities_do_not_move_with_the_optimizer(self):
        rng = np.random.default_rng(11)
        cfg = GUConfig(gamma=1.0, alpha=1.0)
        state = AdaptiveState.init(6)
        theta = rng.normal(size=6)
        theta, state = adaptive_step(state, theta, rng.normal(size=6))
        metric = snapshot_metric(state)
        basis = RetainBasis(6, rank_cap=3)
        g_r = rng.normal(size=6)
        basis.insert_retain_gradient(whiten(g_r, metric))
        g_f = rng.normal(size=6)
        bundle = GradientBundle.from_observed(g_f + g_r, g_r, metric, cfg)
        before = compose_gu_direction(bundle, basis, metric, cfg)
        # mutate the optimizer mid-step; the snapshot must not notice
        for _ in range(3):
            theta, state = adaptive_step(state, theta, rng.normal(size=6))
        after = compose_gu_direction(bundle, basis, metric, cfg)
        assert np.array_equal(before.direction, after.direction)
        assert before.entanglement_before == after.entanglement_before
        assert before.predicted_retain_change == after.predicted_retain_change
