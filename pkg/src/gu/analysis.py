"""Closed-form first-order quantities and the oracles that cross-check them.

The calculators here express every guaranteed quantity of the split step
(`-rho * (P_perp g_f + beta * P_tan g_r)`) in terms of metric energies, and
the oracle half of the module provides independent routes: dense projector
matrices, central finite differences, and random feasible search.  Tests
always compare a fast path against one of these slow paths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metric import DiagonalMetric, dewhiten, h_gradient, inner, norm, whiten
from .subspace import RetainBasis

__all__ = [
    "FirstOrderReport",
    "NonpositivityFlags",
    "predicted_retain_change",
    "predicted_joint_change",
    "nonpositivity_conditions",
    "descent_stepsize_bound",
    "steepest_feasible_direction",
    "finite_difference_directional",
    "finite_difference_schedule",
    "joint_descent_bound",
    "dense_projector_pair",
    "random_feasible_unit_directions",
]

_DEGENERATE_PERP = 1e-12


@dataclass(frozen=True)
class FirstOrderReport:
    """Scalar decomposition of one split step's first-order effect."""

    predicted_retain_change: float
    predicted_joint_change: float
    cross_term: float
    perp_energy: float
    tangent_energy: float
    retain_energy: float


@dataclass(frozen=True)
class NonpositivityFlags:
    """Sufficient conditions under which the joint change is nonpositive.

    ``case_b`` is ``None`` when it is not applicable (``alpha == 0``).
    """

    case_a: bool
    case_b: bool | None
    case_c: bool

    def any_true(self) -> bool:
        return self.case_a or bool(self.case_b) or self.case_c


def predicted_retain_change(rho: float, beta: float, retain_h_grad,
                            metric: DiagonalMetric) -> float:
    """First-order retain change of the split step: ``-rho*beta*|g_r|_H^2``."""
    if not rho > 0.0:
        raise ValueError("rho must be > 0")
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    if beta == 0.0:
        return 0.0
    return -rho * beta * norm(retain_h_grad, metric) ** 2


def predicted_joint_change(rho: float, alpha: float, beta: float,
                           forget_h_grad, retain_h_grad, basis: RetainBasis,
                           metric: DiagonalMetric) -> FirstOrderReport:
    """Exact first-order change of the joint objective under the split step.

    Valid as an identity when the whitened retain gradient lies in the basis
    span; outside that span the report still holds the component energies
    but the identity degrades with the principal angle of the mismatch.
    """
    if not rho > 0.0:
        raise ValueError("rho must be > 0")
    g_f_w = whiten(forget_h_grad, metric)
    perp = float(np.linalg.norm(basis.project_normal(g_f_w))) ** 2
    tangent_vec = basis.project_tangent(g_f_w)
    tangent = float(np.linalg.norm(tangent_vec)) ** 2
    g_r_w = whiten(retain_h_grad, metric)
    retain = float(np.dot(g_r_w, g_r_w))
    cross = float(np.dot(tangent_vec, g_r_w))
    joint = -rho * (perp + alpha * beta * retain + beta * cross)
    return FirstOrderReport(
        predicted_retain_change=(-rho * beta * retain if beta > 0.0 else 0.0),
        predicted_joint_change=joint,
        cross_term=cross,
        perp_energy=perp,
        tangent_energy=tangent,
        retain_energy=retain,
    )


def nonpositivity_conditions(alpha: float, beta: float,
                             report: FirstOrderReport) -> NonpositivityFlags:
    """Evaluate the three sufficient nonpositivity conditions on a report."""
    case_a = beta == 0.0
    if alpha > 0.0:
        case_b = (report.perp_energy + 0.5 * alpha * beta * report.retain_energy
                  >= (beta / (2.0 * alpha)) * report.tangent_energy)
    else:
        case_b = None
    case_c = (alpha * np.sqrt(report.retain_energy)
              >= np.sqrt(report.tangent_energy))
    return NonpositivityFlags(case_a=case_a, case_b=case_b, case_c=bool(case_c))


def descent_stepsize_bound(beta: float, retain_energy: float,
                           perp_energy: float, lipschitz_h: float) -> float:
    """Largest step size with guaranteed strict retain descent.

    ``2*beta*|g_r|^2 / (L * (|P_perp g_f|^2 + beta^2 |g_r|^2))``; zero in
    the neutral ``beta == 0`` regime.
    """
    if not lipschitz_h > 0.0:
        raise ValueError("lipschitz constant must be > 0")
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    if beta == 0.0:
        return 0.0
    denom = lipschitz_h * (perp_energy + beta * beta * retain_energy)
    if denom == 0.0:
        return np.inf
    return 2.0 * beta * retain_energy / denom


def steepest_feasible_direction(forget_h_grad, basis: RetainBasis,
                                metric: DiagonalMetric) -> tuple[np.ndarray | None, bool]:
    """Unit-metric-norm feasible direction with the best first-order forget drop.

    Returns ``(direction, degenerate)``; the degenerate flag is set when the
    normal component vanishes relative to the gradient, in which case every
    feasible unit vector is equally good and ``direction`` is ``None``.
    """
    g_f_w = whiten(forget_h_grad, metric)
    perp_w = basis.project_normal(g_f_w)
    pnorm = float(np.linalg.norm(perp_w))
    gnorm = float(np.linalg.norm(g_f_w))
    if pnorm <= _DEGENERATE_PERP * max(gnorm, 1.0):
        return None, True
    return dewhiten(-perp_w / pnorm, metric), False


def finite_difference_directional(objective, theta, direction,
                                  step: float) -> float:
    """Central-difference directional derivative of a scalar objective."""
    if not step > 0.0:
        raise ValueError("step must be > 0")
    t = np.asarray(theta, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    hi = objective.loss(t + step * d)
    lo = objective.loss(t - step * d)
    if not (np.isfinite(hi) and np.isfinite(lo)):
        raise ValueError("objective evaluated to a non-finite loss")
    return (hi - lo) / (2.0 * step)


def finite_difference_schedule(objective, theta, direction,
                               steps=(1e-4, 1e-5, 1e-6)) -> list[float]:
    """Directional derivative at several step sizes, for consistency checks."""
    return [finite_difference_directional(objective, theta, direction, h)
            for h in steps]


def joint_descent_bound(report: FirstOrderReport, alpha: float,
                        lipschitz_f: float, lipschitz_r: float,
                        step_norm_sq: float) -> float:
    """Smoothness upper bound on the actual joint-objective change."""
    if not (lipschitz_f > 0.0 and lipschitz_r > 0.0):
        raise ValueError("Lipschitz constants must be > 0")
    return (report.predicted_joint_change
            + 0.5 * (lipschitz_f + alpha * lipschitz_r) * step_norm_sq)


# ---------------------------------------------------------------------------
# oracles


def dense_projector_pair(raw_basis: np.ndarray,
                         metric: DiagonalMetric) -> tuple[np.ndarray, np.ndarray]:
    """Dense raw-coordinate projectors ``U (U^T H U)^{-1} U^T H`` and its
    complement, built explicitly for oracle comparisons."""
    u = np.asarray(raw_basis, dtype=np.float64)
    if u.ndim != 2 or u.shape[0] != metric.dim:
        raise ValueError("raw basis must be a (dim, rank) matrix")
    h = metric.dense()
    gram = u.T @ h @ u
    p_tan = u @ np.linalg.solve(gram, u.T @ h)
    return p_tan, np.eye(metric.dim) - p_tan


def random_feasible_unit_directions(basis: RetainBasis, metric: DiagonalMetric,
                                    count: int,
                                    rng: np.random.Generator) -> np.ndarray:
    """Sample raw-coordinate directions uniformly from the feasible set
    boundary: metric-orthogonal to the basis span with unit metric norm."""
    z = rng.normal(size=(count, metric.dim))
    if basis.rank > 0:
        u = basis.matrix()
        z = z - (z @ u) @ u.T
    norms = np.linalg.norm(z, axis=1, keepdims=True)
    keep = norms[:, 0] > 0
    z = z[keep] / norms[keep]
    return z / metric.whitener  # dewhiten row-wise


def first_order_change(objective_grad, delta, metric: DiagonalMetric) -> float:
    """Metric-form first-order change ``<H^{-1} g, delta>_H`` (= g . delta)."""
    return inner(h_gradient(objective_grad, metric), delta, metric)
