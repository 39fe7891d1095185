"""One geometry-disentangled update: recovery, selection, capping, composition.

Two step forms coexist on purpose.  ``compose_gu_direction`` builds the
practical gradient that is handed to a base optimizer, with the retain
tangential projection weighted by ``alpha``.  ``split_step_direction`` is
the analysis form ``-rho * (P_perp g_f + beta * P_tan g_r)`` applied to
metric gradients directly; the first-order guarantees are stated and tested
against that form.

Sign convention for the selective tangential term: the gate keeps exactly
the indices with ``a_i * b_i < -tau`` (opposite-signed forget/retain
coordinates along a basis column), and the kept, capped vector enters the
descent direction with a minus sign.  The resulting parameter motion is
``+rho * a_i u_i`` along each kept column, whose first-order retain change
is ``rho * a_i b_i < -rho * tau`` per column: strictly negative.  Applying
the kept term with a plus sign instead would make the same quantity
positive and void the strengthened retain bound, so only the minus
orientation is offered.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .metric import DiagonalMetric, dewhiten, whiten
from .subspace import RetainBasis

__all__ = [
    "GUConfig",
    "GradientBundle",
    "StepReport",
    "SignAwareInfo",
    "recover_forget_gradient",
    "sign_aware_select",
    "cap_tangential",
    "compose_gu_direction",
    "split_step_direction",
    "sign_aware_split_step",
]


@dataclass(frozen=True)
class GUConfig:
    """All tunables of the projected update.

    ``gamma``/``alpha`` weight the forget and retain terms of the composed
    gradient, ``beta`` is the tangential repair weight of the analysis-form
    step (the two are deliberately not aliased), ``kappa``/``tau`` control
    the sign-aware trust region, ``rho`` is the analysis-form step size,
    and the remaining knobs configure basis maintenance.
    """

    gamma: float = 1.0
    alpha: float = 1.0
    beta: float = 0.0
    kappa: float = 0.5
    tau: float = 0.0
    rho: float = 0.05
    rank_cap: int = 16
    residual_keep_thresh: float = 0.1
    refresh_period: int = 8
    sign_aware: bool = False
    metric_bias_corrected: bool = True

    def __post_init__(self):
        if not self.gamma > 0.0:
            raise ValueError("gamma must be > 0")
        if self.alpha < 0.0 or self.beta < 0.0:
            raise ValueError("alpha and beta must be >= 0")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError("kappa must lie in [0, 1]")
        if self.tau < 0.0:
            raise ValueError("tau must be >= 0")
        if not self.rho > 0.0:
            raise ValueError("rho must be > 0")
        if self.rank_cap < 1:
            raise ValueError("rank_cap must be >= 1")
        if self.residual_keep_thresh < 0.0:
            raise ValueError("residual_keep_thresh must be >= 0")
        if self.refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")

    def with_sign_aware(self, flag: bool) -> "GUConfig":
        return replace(self, sign_aware=flag)


@dataclass(frozen=True)
class GradientBundle:
    """Per-step gradients in raw and whitened coordinates."""

    total_grad: np.ndarray
    retain_grad: np.ndarray
    forget_grad: np.ndarray
    total_whitened: np.ndarray
    retain_whitened: np.ndarray
    forget_whitened: np.ndarray

    @classmethod
    def from_observed(cls, total_grad, retain_grad, metric: DiagonalMetric,
                      cfg: GUConfig) -> "GradientBundle":
        """Recover the forget gradient from the total and whiten everything."""
        total = np.asarray(total_grad, dtype=np.float64)
        retain = np.asarray(retain_grad, dtype=np.float64)
        forget = recover_forget_gradient(total, retain, cfg)
        return cls(
            total_grad=total,
            retain_grad=retain,
            forget_grad=forget,
            total_whitened=whiten(total, metric),
            retain_whitened=whiten(retain, metric),
            forget_whitened=whiten(forget, metric),
        )

    def reconstruction_error(self, cfg: GUConfig) -> float:
        recon = cfg.gamma * self.forget_grad + cfg.alpha * self.retain_grad
        scale = max(float(np.linalg.norm(self.total_grad)), 1e-300)
        return float(np.linalg.norm(recon - self.total_grad) / scale)


@dataclass
class StepReport:
    """Everything observable about one composed update."""

    entanglement_before: float
    kept_index_set: tuple[int, ...]
    tangential_keep_norm: float
    normal_norm: float
    cap_applied: bool
    predicted_retain_change: float
    predicted_joint_change: float
    direction: np.ndarray
    degenerate_no_basis: bool = False


@dataclass(frozen=True)
class SignAwareInfo:
    """Gate diagnostics of one sign-aware analysis step."""

    kept_indices: tuple[int, ...]
    forget_coeffs: np.ndarray
    retain_coeffs: np.ndarray
    cap_scale: float
    kept_abs_product_sum: float
    applied_abs_product_sum: float


def recover_forget_gradient(total_grad, retain_grad, cfg: GUConfig) -> np.ndarray:
    """Invert ``total = gamma * forget + alpha * retain`` for the forget part."""
    total = np.asarray(total_grad, dtype=np.float64)
    retain = np.asarray(retain_grad, dtype=np.float64)
    if total.shape != retain.shape:
        raise ValueError("total and retain gradients must share a shape")
    if cfg.gamma == 0.0:
        raise ValueError("gamma must be nonzero to recover the forget gradient")
    return (total - cfg.alpha * retain) / cfg.gamma


def sign_aware_select(basis: RetainBasis, forget_whitened, retain_whitened,
                      tau: float) -> tuple[np.ndarray, list[int]]:
    """Keep tangential coordinates with opposite-signed forget/retain products.

    With ``a_i = u_i . g_f`` and ``b_i = u_i . g_r`` (whitened), index ``i``
    is kept iff ``a_i * b_i < -tau`` strictly.  Returns the kept tangential
    vector ``sum_i a_i u_i`` over the kept set, plus the kept indices.
    """
    if tau < 0.0:
        raise ValueError("tau must be >= 0")
    a = basis.coefficients(forget_whitened)
    b = basis.coefficients(retain_whitened)
    kept_mask = (a * b) < -tau
    kept = np.flatnonzero(kept_mask)
    if kept.size == 0:
        return np.zeros(basis.dim), []
    u = basis.matrix()
    vec = u[:, kept] @ a[kept]
    return vec, [int(i) for i in kept]


def cap_tangential(kept_tangential, normal_component,
                   kappa: float) -> tuple[np.ndarray, bool]:
    """Rescale the kept tangential vector to at most ``kappa`` times the
    normal component's norm, preserving its direction."""
    if not 0.0 <= kappa <= 1.0:
        raise ValueError("kappa must lie in [0, 1]")
    kept = np.asarray(kept_tangential, dtype=np.float64)
    knorm = float(np.linalg.norm(kept))
    limit = kappa * float(np.linalg.norm(normal_component))
    if knorm <= limit or knorm == 0.0:
        return kept.copy(), False
    return kept * (limit / knorm), True


def compose_gu_direction(bundle: GradientBundle, basis: RetainBasis,
                         metric: DiagonalMetric, cfg: GUConfig) -> StepReport:
    """Assemble the projected gradient handed to the base optimizer.

    Whitened form: ``gamma * (normal(g_f) - kept_tangential) + alpha *
    tangent(g_r)``, mapped back to raw coordinates.  With an empty basis the
    projection is undefined and the direction degenerates to the unprojected
    total gradient; the report flags that case.

    Predicted first-order changes are for a raw step ``-rho * direction``.
    """
    if basis.dim != metric.dim:
        raise ValueError("basis and metric dimensions differ")
    if bundle.forget_whitened.shape[0] != metric.dim:
        raise ValueError("bundle and metric dimensions differ")

    g_f_w = bundle.forget_whitened
    g_r_w = bundle.retain_whitened
    entanglement = basis.entanglement(g_f_w)

    if basis.rank == 0:
        direction = cfg.gamma * bundle.forget_grad + cfg.alpha * bundle.retain_grad
        return StepReport(
            entanglement_before=entanglement,
            kept_index_set=(),
            tangential_keep_norm=0.0,
            normal_norm=float(np.linalg.norm(g_f_w)),
            cap_applied=False,
            predicted_retain_change=-cfg.rho * float(np.dot(bundle.retain_grad, direction)),
            predicted_joint_change=-cfg.rho * float(np.dot(bundle.total_grad, direction)),
            direction=direction,
            degenerate_no_basis=True,
        )

    normal = basis.project_normal(g_f_w)
    if cfg.sign_aware:
        kept_vec, kept_idx = sign_aware_select(basis, g_f_w, g_r_w, cfg.tau)
        capped, cap_applied = cap_tangential(kept_vec, normal, cfg.kappa)
    else:
        kept_idx = []
        capped = np.zeros(metric.dim)
        cap_applied = False
    retain_tan = basis.project_tangent(g_r_w)

    composed_w = cfg.gamma * (normal - capped) + cfg.alpha * retain_tan
    direction = dewhiten(composed_w, metric)

    return StepReport(
        entanglement_before=entanglement,
        kept_index_set=tuple(kept_idx),
        tangential_keep_norm=float(np.linalg.norm(capped)),
        normal_norm=float(np.linalg.norm(normal)),
        cap_applied=cap_applied,
        predicted_retain_change=-cfg.rho * float(np.dot(bundle.retain_grad, direction)),
        predicted_joint_change=-cfg.rho * float(np.dot(bundle.total_grad, direction)),
        direction=direction,
        degenerate_no_basis=False,
    )


def split_step_direction(forget_h_grad, retain_h_grad, basis: RetainBasis,
                         metric: DiagonalMetric, rho: float,
                         beta: float) -> np.ndarray:
    """Analysis-form step ``-rho * (P_perp g_f + beta * P_tan g_r)``.

    Inputs are metric gradients (already preconditioned); the projectors are
    applied by whitening, Euclidean projection against the basis, and
    mapping back.
    """
    if not rho > 0.0:
        raise ValueError("rho must be > 0")
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    g_f_w = whiten(forget_h_grad, metric)
    g_r_w = whiten(retain_h_grad, metric)
    step_w = -rho * (basis.project_normal(g_f_w) + beta * basis.project_tangent(g_r_w))
    return dewhiten(step_w, metric)


def sign_aware_split_step(forget_h_grad, retain_h_grad, basis: RetainBasis,
                          metric: DiagonalMetric, rho: float, beta: float,
                          tau: float, kappa: float) -> tuple[np.ndarray, SignAwareInfo]:
    """Analysis-form step with the selective tangential term included.

    Step: ``-rho * (P_perp g_f - kept_capped + beta * P_tan g_r)``.  When
    the whitened retain gradient lies in the basis span, its first-order
    retain change is ``-rho * s * sum_kept |a_i||b_i| - rho * beta *
    |g_r|_H^2`` with ``s`` the cap scale, which for ``tau <= min(s, 1)``
    is bounded above by ``-rho * tau * sum_kept |a_i||b_i|``.
    """
    if not rho > 0.0:
        raise ValueError("rho must be > 0")
    if beta < 0.0:
        raise ValueError("beta must be >= 0")
    g_f_w = whiten(forget_h_grad, metric)
    g_r_w = whiten(retain_h_grad, metric)
    normal = basis.project_normal(g_f_w)
    kept_vec, kept_idx = sign_aware_select(basis, g_f_w, g_r_w, tau)
    capped, _ = cap_tangential(kept_vec, normal, kappa)
    knorm = float(np.linalg.norm(kept_vec))
    scale = float(np.linalg.norm(capped)) / knorm if knorm > 0.0 else 1.0

    a = basis.coefficients(g_f_w)
    b = basis.coefficients(g_r_w)
    kept_sum = float(np.sum(np.abs(a[kept_idx]) * np.abs(b[kept_idx]))) if kept_idx else 0.0

    step_w = -rho * (normal - capped + beta * basis.project_tangent(g_r_w))
    info = SignAwareInfo(
        kept_indices=tuple(kept_idx),
        forget_coeffs=a,
        retain_coeffs=b,
        cap_scale=scale,
        kept_abs_product_sum=kept_sum,
        applied_abs_product_sum=scale * kept_sum,
    )
    return dewhiten(step_w, metric), info
