"""Diagonal SPD metric induced by an optimizer's second-moment state.

Every projection, norm and first-order identity in this package is taken
with respect to the inner product ``<u, v> = sum_i u_i * h_i * v_i`` for a
strictly positive diagonal ``h``.  The whitener ``w = sqrt(h)`` turns that
inner product into the plain Euclidean one, which is where the retain basis
lives (see :mod:`gu.subspace`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiagonalMetric",
    "metric_from_second_moments",
    "identity_metric",
    "inner",
    "norm",
    "whiten",
    "dewhiten",
    "h_gradient",
]


def _as_vector(x, name: str) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be a 1-D vector, got shape {v.shape}")
    return v


def _check_dim(v: np.ndarray, m: "DiagonalMetric", name: str) -> None:
    if v.shape[0] != m.dim:
        raise ValueError(
            f"{name} has dimension {v.shape[0]}, metric has dimension {m.dim}"
        )


@dataclass(frozen=True)
class DiagonalMetric:
    """Immutable diagonal SPD metric.

    ``diag_h`` holds one strictly positive entry per parameter coordinate
    and always equals the squared whitener entrywise, so whitening is an
    exact isometry onto Euclidean space.  ``epsilon`` records the damping
    constant used at construction time (kept for provenance; it does not
    enter any later computation).
    """

    diag_h: np.ndarray
    epsilon: float = 1e-8
    whitener: np.ndarray | None = None

    def __post_init__(self):
        h = _as_vector(self.diag_h, "diag_h")
        if not np.all(np.isfinite(h)):
            raise ValueError("diag_h entries must be finite")
        if np.any(h <= 0.0):
            raise ValueError("diag_h entries must be strictly positive (SPD)")
        if self.whitener is None:
            w = np.sqrt(h)
        else:
            w = _as_vector(self.whitener, "whitener")
            if w.shape != h.shape or np.any(w <= 0.0):
                raise ValueError("whitener must be positive and match diag_h")
            if not np.allclose(w * w, h, rtol=1e-12, atol=0.0):
                raise ValueError("whitener does not square to diag_h")
        # re-derive the diagonal from the whitener so H = W^T W holds
        # exactly, not just to round-off
        h = w * w
        h.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "diag_h", h)
        object.__setattr__(self, "whitener", w)

    @property
    def dim(self) -> int:
        return self.diag_h.shape[0]

    def dense(self) -> np.ndarray:
        """Dense matrix form, for oracle comparisons only."""
        return np.diag(self.diag_h)


def metric_from_second_moments(v_hat, epsilon: float) -> DiagonalMetric:
    """Build the metric from a second-moment accumulator.

    The whitener is ``1 / sqrt(v_hat + epsilon)`` entrywise and the metric
    diagonal is its square, so ``H = W^T W`` holds by construction.
    """
    v = _as_vector(v_hat, "v_hat")
    if not np.all(np.isfinite(v)):
        raise ValueError("second moments must be finite")
    if np.any(v < 0.0):
        raise ValueError("second moments must be nonnegative")
    if not (np.isfinite(epsilon) and epsilon > 0.0):
        raise ValueError("epsilon must be a positive finite scalar")
    w = 1.0 / np.sqrt(v + epsilon)
    return DiagonalMetric(diag_h=w * w, epsilon=float(epsilon), whitener=w)


def identity_metric(dim: int) -> DiagonalMetric:
    if dim < 1:
        raise ValueError("dimension must be >= 1")
    return DiagonalMetric(diag_h=np.ones(dim), epsilon=1e-8)


def inner(u, v, m: DiagonalMetric) -> float:
    """Metric inner product ``u^T H v``."""
    uu = _as_vector(u, "u")
    vv = _as_vector(v, "v")
    _check_dim(uu, m, "u")
    _check_dim(vv, m, "v")
    return float(np.dot(uu * m.diag_h, vv))


def norm(v, m: DiagonalMetric) -> float:
    """Metric norm ``sqrt(v^T H v)``; zero iff ``v`` is zero."""
    vv = _as_vector(v, "v")
    _check_dim(vv, m, "v")
    # computed via the whitener to avoid any negative round-off under sqrt
    return float(np.linalg.norm(m.whitener * vv))


def whiten(v, m: DiagonalMetric) -> np.ndarray:
    """Map to whitened coordinates where the metric becomes Euclidean."""
    vv = _as_vector(v, "v")
    _check_dim(vv, m, "v")
    return m.whitener * vv


def dewhiten(v, m: DiagonalMetric) -> np.ndarray:
    """Inverse of :func:`whiten`."""
    vv = _as_vector(v, "v")
    _check_dim(vv, m, "v")
    return vv / m.whitener


def h_gradient(euclidean_grad, m: DiagonalMetric) -> np.ndarray:
    """Metric gradient ``H^{-1} g``.

    Satisfies ``inner(h_gradient(g), d, m) == dot(g, d)`` for every
    direction ``d``, so directional derivatives expressed in the metric
    inner product agree with the Euclidean ones.
    """
    g = _as_vector(euclidean_grad, "euclidean_grad")
    _check_dim(g, m, "euclidean_grad")
    return g / m.diag_h
