"""Built-in invariant battery behind the ``selftest`` CLI subcommand.

Each check compares a library fast path against an independent slow path
(dense projector matrices, central finite differences, brute-force inner
products) on freshly sampled instances.  Returns one (name, ok, detail)
triple per check so callers control printing and exit codes.
"""

from __future__ import annotations

import numpy as np

from .analysis import (
    dense_projector_pair,
    finite_difference_directional,
    predicted_joint_change,
    predicted_retain_change,
    random_feasible_unit_directions,
    steepest_feasible_direction,
)
from .metric import dewhiten, h_gradient, identity_metric, inner, metric_from_second_moments, norm, whiten
from .models import FeedForwardNet, CrossEntropyObjective, LogisticObjective, QuadraticObjective
from .step import GUConfig, split_step_direction
from .subspace import RetainBasis

__all__ = ["run_selftest", "SELFTEST_CHECKS"]


def _random_metric(rng, dim):
    return metric_from_second_moments(rng.uniform(0.0, 4.0, size=dim), 1e-2)


def _random_basis(rng, dim, rank):
    basis = RetainBasis(dim, rank_cap=rank, residual_keep_thresh=0.05)
    for _ in range(rank):
        basis.insert_retain_gradient(rng.normal(size=dim))
    return basis


def _check_metric_identities(rng):
    worst = 0.0
    for _ in range(200):
        dim = int(rng.integers(2, 32))
        m = _random_metric(rng, dim)
        u = rng.normal(size=dim)
        v = rng.normal(size=dim)
        dense = float(u @ m.dense() @ v)
        worst = max(worst, abs(inner(u, v, m) - dense) / max(1.0, abs(dense)))
        worst = max(worst, abs(np.dot(whiten(u, m), whiten(v, m)) - inner(u, v, m))
                    / max(1.0, abs(dense)))
        worst = max(worst, float(np.max(np.abs(dewhiten(whiten(u, m), m) - u)))
                    / max(1.0, float(np.max(np.abs(u)))))
        worst = max(worst, abs(inner(h_gradient(u, m), v, m) - np.dot(u, v))
                    / max(1.0, abs(np.dot(u, v))))
    return worst <= 1e-12, f"worst relative error {worst:.3e}"


def _check_dense_projector(rng):
    worst = 0.0
    for _ in range(200):
        dim = int(rng.integers(4, 32))
        rank = int(rng.integers(1, min(8, dim)))
        m = _random_metric(rng, dim)
        basis = _random_basis(rng, dim, rank)
        raw = np.column_stack([dewhiten(c, m) for c in basis.columns])
        p_tan, p_perp = dense_projector_pair(raw, m)
        v = rng.normal(size=dim)
        tan = dewhiten(basis.project_tangent(whiten(v, m)), m)
        per = dewhiten(basis.project_normal(whiten(v, m)), m)
        scale = max(1.0, float(np.linalg.norm(v)))
        worst = max(worst, float(np.linalg.norm(tan - p_tan @ v)) / scale)
        worst = max(worst, float(np.linalg.norm(per - p_perp @ v)) / scale)
    return worst <= 1e-9, f"worst relative deviation {worst:.3e}"


def _check_gradients(rng):
    worst = 0.0
    dim = 6
    quad = QuadraticObjective(rng.normal(size=dim), rng.uniform(0.5, 2.0, dim))
    logi = LogisticObjective([(rng.normal(size=dim), int(rng.integers(0, 2)))
                              for _ in range(12)])
    net = FeedForwardNet([dim, 5, 2])
    ce = CrossEntropyObjective(net, [(rng.normal(size=dim), int(rng.integers(0, 2)))
                                     for _ in range(10)])
    for obj, p in ((quad, dim), (logi, dim), (ce, net.n_params)):
        for _ in range(5):
            theta = rng.normal(size=p) * 0.5
            d = rng.normal(size=p)
            d /= np.linalg.norm(d)
            fd = finite_difference_directional(obj, theta, d, 1e-5)
            an = float(np.dot(obj.gradient(theta), d))
            worst = max(worst, abs(fd - an) / max(1.0, abs(an)))
    return worst <= 1e-6, f"worst relative error {worst:.3e}"


def _check_safety_identity(rng):
    worst = 0.0
    for _ in range(200):
        dim = int(rng.integers(4, 24))
        rank = int(rng.integers(1, min(6, dim)))
        m = _random_metric(rng, dim)
        basis = _random_basis(rng, dim, rank)
        coef = rng.normal(size=basis.rank)
        g_r = dewhiten(basis.matrix() @ coef, m)
        g_f = rng.normal(size=dim)
        rho = float(rng.uniform(0.01, 1.0))
        beta = float(rng.uniform(0.0, 2.0))
        delta = split_step_direction(g_f, g_r, basis, m, rho, beta)
        got = inner(g_r, delta, m)
        want = -rho * beta * norm(g_r, m) ** 2
        worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    return worst <= 1e-9, f"worst relative error {worst:.3e}"


def _check_joint_identity(rng):
    worst = 0.0
    for _ in range(200):
        dim = int(rng.integers(4, 24))
        rank = int(rng.integers(1, min(6, dim)))
        m = _random_metric(rng, dim)
        basis = _random_basis(rng, dim, rank)
        g_r = dewhiten(basis.matrix() @ rng.normal(size=basis.rank), m)
        g_f = rng.normal(size=dim)
        rho = float(rng.uniform(0.01, 1.0))
        alpha = float(rng.uniform(0.0, 2.0))
        beta = float(rng.uniform(0.0, 2.0))
        delta = split_step_direction(g_f, g_r, basis, m, rho, beta)
        fo = predicted_joint_change(rho, alpha, beta, g_f, g_r, basis, m)
        direct = inner(np.asarray(g_f) + alpha * np.asarray(g_r),
                       delta, m)
        # inner() on h-gradients: here g_f, g_r already are the metric
        # gradients fed to the step, so the joint change is their H-inner
        # product with the step
        worst = max(worst, abs(fo.predicted_joint_change - direct)
                    / max(1.0, abs(direct)))
    return worst <= 1e-9, f"worst relative error {worst:.3e}"


def _check_steepest(rng):
    slack = 0.0
    for _ in range(20):
        dim = int(rng.integers(4, 16))
        m = _random_metric(rng, dim)
        basis = _random_basis(rng, dim, 2)
        g_f = rng.normal(size=dim)
        direction, degenerate = steepest_feasible_direction(g_f, basis, m)
        if degenerate:
            continue
        best = inner(g_f, direction, m)
        cand = random_feasible_unit_directions(basis, m, 2000, rng)
        vals = cand @ (m.diag_h * g_f)
        slack = max(slack, float(best - vals.min()))
        # best must be <= every sampled value, so the slack stays <= 0
    return slack <= 1e-9, f"worst optimality slack {slack:.3e}"


SELFTEST_CHECKS = (
    ("metric_identities", _check_metric_identities),
    ("dense_projector_equivalence", _check_dense_projector),
    ("finite_difference_gradients", _check_gradients),
    ("safety_identity", _check_safety_identity),
    ("joint_identity", _check_joint_identity),
    ("steepest_feasible_direction", _check_steepest),
)


def run_selftest(seed: int = 0) -> list[tuple[str, bool, str]]:
    results = []
    for index, (name, fn) in enumerate(SELFTEST_CHECKS):
        rng = np.random.default_rng([seed, index])
        ok, detail = fn(rng)
        results.append((name, ok, detail))
    return results
