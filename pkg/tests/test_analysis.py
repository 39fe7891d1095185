import numpy as np
import pytest

from gu.analysis import (
    descent_stepsize_bound,
    finite_difference_directional,
    finite_difference_schedule,
    joint_descent_bound,
    nonpositivity_conditions,
    predicted_joint_change,
    predicted_retain_change,
    random_feasible_unit_directions,
    steepest_feasible_direction,
)
from gu.metric import dewhiten, h_gradient, identity_metric, inner, metric_from_second_moments, norm, whiten
from gu.models import mlp_objective, quadratic_objective
from gu.step import split_step_direction
from gu.subspace import RetainBasis


def random_metric(rng, dim):
    return metric_from_second_moments(rng.uniform(0, 3, size=dim), 1e-2)


def basis_of_rank(rng, dim, rank):
    basis = RetainBasis(dim, rank_cap=rank, residual_keep_thresh=0.05)
    while basis.rank < rank:
        basis.insert_retain_gradient(rng.normal(size=dim))
    return basis


def in_span(rng, basis, m):
    coef = rng.normal(size=basis.rank)
    coef *= rng.uniform(0.4, 1.5) / np.linalg.norm(coef)
    return dewhiten(basis.matrix() @ coef, m)


class TestPredictedRetainChange:
    def test_beta_zero_is_exactly_zero(self):
        m = identity_metric(3)
        assert predicted_retain_change(1.0, 0.0, np.ones(3), m) == 0.0

    def test_formula_example(self):
        m = identity_metric(2)
        g_r = np.array([2.0, 0.0])  # metric norm 2
        assert predicted_retain_change(1.0, 1.0, g_r, m) == pytest.approx(-4.0, abs=0.0)

    def test_matches_direct_inner_product(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            dim = int(rng.integers(3, 16))
            m = random_metric(rng, dim)
            basis = basis_of_rank(rng, dim, min(4, dim - 1))
            g_r = in_span(rng, basis, m)
            g_f = rng.normal(size=dim)
            rho = float(rng.uniform(0.1, 1.5))
            beta = float(rng.uniform(0.0, 2.0))
            delta = split_step_direction(g_f, g_r, basis, m, rho, beta)
            want = inner(g_r, delta, m)
            got = predicted_retain_change(rho, beta, g_r, m)
            assert abs(got - want) <= 1e-10 * max(abs(want), rho * norm(g_r, m) ** 2, 1e-30)


class TestPredictedJointChange:
    def test_beta_zero_specialization(self):
        rng = np.random.default_rng(2)
        m = random_metric(rng, 8)
        basis = basis_of_rank(rng, 8, 3)
        g_f = rng.normal(size=8)
        fo = predicted_joint_change(0.5, 1.0, 0.0, g_f, np.zeros(8), basis, m)
        perp = np.linalg.norm(basis.project_normal(whiten(g_f, m))) ** 2
        assert fo.predicted_joint_change == pytest.approx(-0.5 * perp, rel=1e-12)

    def test_hand_instance_minus_26(self):
        m = identity_metric(3)
        basis = RetainBasis(3)
        basis.insert_retain_gradient([1.0, 0.0, 0.0])
        fo = predicted_joint_change(1.0, 1.0, 1.0,
                                    np.array([3.0, 4.0, 0.0]),
                                    np.array([2.0, 0.0, 0.0]), basis, m)
        assert fo.perp_energy == pytest.approx(16.0, abs=1e-12)
        assert fo.retain_energy == pytest.approx(4.0, abs=1e-12)
        assert fo.cross_term == pytest.approx(6.0, abs=1e-12)
        assert fo.predicted_joint_change == pytest.approx(-26.0, abs=1e-12)

    def test_matches_direct_inner_product(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            dim = int(rng.integers(3, 14))
            m = random_metric(rng, dim)
            basis = basis_of_rank(rng, dim, min(3, dim - 1))
            g_r = in_span(rng, basis, m)
            g_f = rng.normal(size=dim)
            rho = float(rng.uniform(0.1, 1.0))
            alpha = float(rng.uniform(0.0, 2.0))
            beta = float(rng.uniform(0.0, 2.0))
            delta = split_step_direction(g_f, g_r, basis, m, rho, beta)
            direct = inner(np.asarray(g_f) + alpha * np.asarray(g_r), delta, m)
            fo = predicted_joint_change(rho, alpha, beta, g_f, g_r, basis, m)
            scale = max(abs(direct), rho * (fo.perp_energy + fo.retain_energy
                                            + abs(fo.cross_term)), 1e-30)
            assert abs(fo.predicted_joint_change - direct) <= 1e-9 * scale

    def test_pythagoras_under_metric(self):
        rng = np.random.default_rng(4)
        for _ in range(60):
            dim = int(rng.integers(3, 20))
            m = random_metric(rng, dim)
            basis = basis_of_rank(rng, dim, min(5, dim - 1))
            g_f = rng.normal(size=dim)
            fo = predicted_joint_change(1.0, 1.0, 1.0, g_f, np.zeros(dim), basis, m)
            total = norm(g_f, m) ** 2
            assert abs(fo.perp_energy + fo.tangent_energy - total) <= 1e-10 * total


class TestNonpositivityConditions:
    def _report(self, perp, tangent, retain):
        from gu.analysis import FirstOrderReport
        return FirstOrderReport(0.0, 0.0, 0.0, perp, tangent, retain)

    def test_case_a(self):
        flags = nonpositivity_conditions(1.0, 0.0, self._report(1, 1, 1))
        assert flags.case_a and flags.any_true()

    def test_hand_instance(self):
        # |g_r| = 2, |P_tan g_f| = 3, |P_perp g_f|^2 = 16, alpha = beta = 1
        flags = nonpositivity_conditions(1.0, 1.0, self._report(16.0, 9.0, 4.0))
        assert flags.case_c is False          # 2 >= 3 fails
        assert flags.case_b is True            # 16 + 2 >= 4.5
        assert not flags.case_a

    def test_alpha_zero_case_b_not_applicable(self):
        flags = nonpositivity_conditions(0.0, 1.0, self._report(1.0, 1.0, 1.0))
        assert flags.case_b is None

    def test_implication_on_random_instances(self):
        rng = np.random.default_rng(5)
        for _ in range(2000):
            dim = int(rng.integers(3, 10))
            m = random_metric(rng, dim)
            basis = basis_of_rank(rng, dim, min(2, dim - 1))
            g_r = in_span(rng, basis, m)
            g_f = rng.normal(size=dim)
            rho = float(rng.uniform(0.05, 1.0))
            alpha = float(rng.uniform(0.0, 2.0))
            beta = float(rng.uniform(0.0, 2.0))
            fo = predicted_joint_change(rho, alpha, beta, g_f, g_r, basis, m)
            flags = nonpositivity_conditions(alpha, beta, fo)
            if flags.case_b or flags.case_c:
                assert fo.predicted_joint_change <= 1e-12


class TestDescentStepsizeBound:
    def test_beta_zero_gives_zero(self):
        assert descent_stepsize_bound(0.0, 4.0, 16.0, 2.0) == 0.0

    def test_formula_example(self):
        assert descent_stepsize_bound(1.0, 4.0, 16.0, 2.0) == pytest.approx(0.2, abs=0.0)

    def test_quadratic_strict_descent_below_bound(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            dim = int(rng.integers(3, 10))
            m = random_metric(rng, dim)
            curv = rng.uniform(0.5, 3.0, size=dim)
            quad = quadratic_objective(rng.normal(size=dim), curv)
            theta = quad.center + rng.normal(size=dim)
            g_r = h_gradient(quad.gradient(theta), m)
            basis = RetainBasis(dim, rank_cap=4, residual_keep_thresh=0.05)
            basis.insert_retain_gradient(whiten(g_r, m))
            while basis.rank < min(3, dim - 1):
                basis.insert_retain_gradient(rng.normal(size=dim))
            g_f = rng.normal(size=dim)
            beta = float(rng.uniform(0.2, 2.0))
            fo = predicted_joint_change(1.0, 1.0, beta, g_f, g_r, basis, m)
            bound = descent_stepsize_bound(beta, fo.retain_energy,
                                           fo.perp_energy, quad.lipschitz_h(m))
            rho = 0.9 * bound
            delta = split_step_direction(g_f, g_r, basis, m, rho, beta)
            assert quad.loss(theta + delta) < quad.loss(theta)


class TestSteepestFeasibleDirection:
    def test_fully_tangential_is_degenerate(self):
        rng = np.random.default_rng(7)
        m = identity_metric(5)
        basis = basis_of_rank(rng, 5, 2)
        g_f = basis.matrix() @ rng.normal(size=2)
        direction, degenerate = steepest_feasible_direction(g_f, basis, m)
        assert degenerate and direction is None

    def test_hand_normalization(self):
        m = identity_metric(3)
        basis = RetainBasis(3)
        basis.insert_retain_gradient([1.0, 0.0, 0.0])
        direction, degenerate = steepest_feasible_direction([3.0, 4.0, 0.0], basis, m)
        assert not degenerate
        assert np.allclose(direction, [0.0, -1.0, 0.0], atol=1e-14)

    def test_random_search_never_beats_closed_form(self):
        rng = np.random.default_rng(8)
        for _ in range(15):
            dim = int(rng.integers(4, 24))
            m = random_metric(rng, dim)
            basis = basis_of_rank(rng, dim, min(3, dim - 1))
            g_f = rng.normal(size=dim)
            direction, degenerate = steepest_feasible_direction(g_f, basis, m)
            if degenerate:
                continue
            best = inner(g_f, direction, m)
            samples = random_feasible_unit_directions(basis, m, 10_000, rng)
            values = samples @ (m.diag_h * np.asarray(g_f))
            assert values.min() >= best - 1e-9

    def test_sampled_directions_are_feasible(self):
        rng = np.random.default_rng(9)
        m = random_metric(rng, 10)
        basis = basis_of_rank(rng, 10, 3)
        samples = random_feasible_unit_directions(basis, m, 200, rng)
        for row in samples:
            assert abs(norm(row, m) - 1.0) <= 1e-10
            assert np.max(np.abs(basis.matrix().T @ whiten(row, m))) <= 1e-10


class TestFiniteDifferences:
    def test_constant_objective(self):
        class Const:
            def loss(self, theta):
                return 3.5
        assert finite_difference_directional(Const(), np.zeros(3), np.ones(3), 1e-4) == 0.0

    def test_quadratic_exactness(self):
        quad = quadratic_objective(np.zeros(2), np.ones(2))
        for h in (1e-2, 1e-4, 1e-6):
            got = finite_difference_directional(
                quad, np.array([1.0, 0.0]), np.array([1.0, 0.0]), h)
            assert got == pytest.approx(1.0, rel=1e-9)

    def test_mlp_matches_analytic_gradient(self):
        rng = np.random.default_rng(10)
        samples = [(rng.normal(size=4), rng.normal(size=2)) for _ in range(5)]
        obj = mlp_objective([4, 6, 2], samples, loss="mse")
        theta = 0.5 * rng.normal(size=obj.net.n_params)
        d = rng.normal(size=obj.net.n_params)
        d /= np.linalg.norm(d)
        fd = finite_difference_directional(obj, theta, d, 1e-5)
        analytic = float(np.dot(obj.gradient(theta), d))
        assert abs(fd - analytic) <= 1e-6 * max(abs(analytic), 1e-6)

    def test_schedule_consistency(self):
        rng = np.random.default_rng(11)
        samples = [(rng.normal(size=3), rng.normal(size=2)) for _ in range(4)]
        obj = mlp_objective([3, 5, 2], samples, loss="mse")
        theta = 0.5 * rng.normal(size=obj.net.n_params)
        d = rng.normal(size=obj.net.n_params)
        vals = finite_difference_schedule(obj, theta, d, steps=(1e-4, 1e-5, 1e-6))
        spread = max(vals) - min(vals)
        assert spread <= 1e-6 * max(1.0, abs(vals[0]))

    def test_nonfinite_loss_raises(self):
        class Bad:
            def loss(self, theta):
                return np.inf
        with pytest.raises(ValueError):
            finite_difference_directional(Bad(), np.zeros(2), np.ones(2), 1e-4)


class TestJointDescentBound:
    def test_zero_step_is_zero(self):
        rng = np.random.default_rng(12)
        m = random_metric(rng, 5)
        basis = basis_of_rank(rng, 5, 2)
        fo = predicted_joint_change(1.0, 1.0, 1.0, np.zeros(5), np.zeros(5), basis, m)
        assert joint_descent_bound(fo, 1.0, 2.0, 2.0, 0.0) == 0.0

    def test_quadratic_bound_holds_on_random_steps(self):
        rng = np.random.default_rng(13)
        dim = 8
        m = random_metric(rng, dim)
        quad_f = quadratic_objective(rng.normal(size=dim), rng.uniform(0.5, 2, dim))
        quad_r = quadratic_objective(rng.normal(size=dim), rng.uniform(0.5, 2, dim))
        lip_f, lip_r = quad_f.lipschitz_h(m), quad_r.lipschitz_h(m)
        alpha = 0.7
        basis = basis_of_rank(rng, dim, 3)
        for _ in range(1000):
            theta = rng.normal(size=dim)
            g_f = h_gradient(quad_f.gradient(theta), m)
            g_r = h_gradient(quad_r.gradient(theta), m)
            basis = RetainBasis(dim, rank_cap=3, residual_keep_thresh=0.05)
            basis.insert_retain_gradient(whiten(g_r, m))
            rho = float(rng.uniform(0.01, 0.5))
            beta = float(rng.uniform(0.0, 1.5))
            delta = split_step_direction(g_f, g_r, basis, m, rho, beta)
            fo = predicted_joint_change(rho, alpha, beta, g_f, g_r, basis, m)
            bound = joint_descent_bound(fo, alpha, lip_f, lip_r,
                                        norm(delta, m) ** 2)
            joint = lambda th: quad_f.loss(th) + alpha * quad_r.loss(th)
            actual = joint(theta + delta) - joint(theta)
            assert actual <= bound + 1e-9 * max(1.0, abs(bound))

    def test_equality_at_top_curvature_direction(self):
        # both quadratics peak on coordinate 0, so a step along e0 makes the
        # smoothness bound exact
        m = identity_metric(3)
        quad_f = quadratic_objective(np.zeros(3), np.array([4.0, 1.0, 0.5]))
        quad_r = quadratic_objective(np.zeros(3), np.array([6.0, 2.0, 1.0]))
        alpha = 1.3
        basis = RetainBasis(3)
        basis.insert_retain_gradient([0.0, 0.0, 1.0])
        theta = np.array([1.0, 0.0, 0.0])
        delta = np.array([0.5, 0.0, 0.0])
        g_f = quad_f.gradient(theta)
        g_r = quad_r.gradient(theta)
        fo = predicted_joint_change(1.0, alpha, 0.0, g_f, g_r, basis, m)
        # rescale the report's rho-1 prediction to the actual step taken
        direct = float(np.dot(g_f + alpha * g_r, delta))
        from gu.analysis import FirstOrderReport
        fo = FirstOrderReport(fo.predicted_retain_change, direct, fo.cross_term,
                              fo.perp_energy, fo.tangent_energy, fo.retain_energy)
        bound = joint_descent_bound(fo, alpha, quad_f.lipschitz_h(m),
                                    quad_r.lipschitz_h(m),
                                    float(np.dot(delta, delta)))
        joint = lambda th: quad_f.loss(th) + alpha * quad_r.loss(th)
        actual = joint(theta + delta) - joint(theta)
        assert actual == pytest.approx(bound, rel=1e-12)


class TestRetainSubspaceEquivalence:
    """Finite form of the orthogonality equivalence: directions produced by
    the normal projector annihilate every combination of the spanned
    per-sample gradients, and any direction with a tangential component
    fails on at least one singleton."""

    def test_forward_direction(self):
        rng = np.random.default_rng(14)
        dim = 12
        m = random_metric(rng, dim)
        grads = [rng.normal(size=dim) for _ in range(4)]
        basis = RetainBasis(dim, rank_cap=6, residual_keep_thresh=0.01)
        for g in grads:
            basis.insert_retain_gradient(whiten(g, m))
        for _ in range(20):
            z = rng.normal(size=dim)
            direction = dewhiten(basis.project_normal(whiten(z, m)), m)
            for _ in range(100):
                coeff = rng.normal(size=len(grads))
                combo = sum(c * g for c, g in zip(coeff, grads))
                scale = norm(direction, m) * max(norm(combo, m), 1e-30)
                assert abs(inner(direction, combo, m)) <= 1e-9 * scale

    def test_converse_direction(self):
        rng = np.random.default_rng(15)
        dim = 10
        m = random_metric(rng, dim)
        grads = [rng.normal(size=dim) for _ in range(3)]
        basis = RetainBasis(dim, rank_cap=5, residual_keep_thresh=0.01)
        for g in grads:
            basis.insert_retain_gradient(whiten(g, m))
        z = rng.normal(size=dim)
        tainted = dewhiten(
            basis.project_normal(whiten(z, m)) + basis.matrix()[:, 0], m)
        overlaps = [abs(inner(tainted, g, m)) for g in grads]
        assert max(overlaps) > 1e-6


class TestFirstOrderMatch:
    def test_error_scales_quadratically_on_mlp(self):
        rng = np.random.default_rng(16)
        samples = [(rng.normal(size=4), rng.normal(size=2)) for _ in range(6)]
        obj = mlp_objective([4, 6, 2], samples, loss="mse")
        theta = 0.4 * rng.normal(size=obj.net.n_params)
        d = rng.normal(size=obj.net.n_params)
        d /= np.linalg.norm(d)
        predicted = float(np.dot(obj.gradient(theta), d))

        def one_sided_err(h):
            return abs((obj.loss(theta + h * d) - obj.loss(theta)) / h - predicted)

        r1 = one_sided_err(1e-3) / 1e-3
        r2 = one_sided_err(1e-4) / 1e-4
        # both ratios estimate half the curvature along d
        assert r1 <= 50 * max(r2, 1e-10) and r2 <= 50 * max(r1, 1e-10)
