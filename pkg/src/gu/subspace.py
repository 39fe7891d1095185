"""Low-rank retain-gradient basis and its orthogonal projectors.

The basis columns are stored in whitened coordinates and kept Euclidean
orthonormal there, so tangential/normal projection is plain Gram-Schmidt
accumulate/subtract.  Conjugating with the whitener recovers the raw
coordinate projector ``U (U^T H U)^{-1} U^T H``; tests compare against that
dense form, the library never builds it.
"""

from __future__ import annotations

import io

import numpy as np

__all__ = ["RetainBasis", "principal_angle_diagnostic"]

# column acceptance below this fraction of the input norm is treated as a
# numerically dead residual regardless of the configured threshold
_DEGENERATE_RESIDUAL = 1e-13


class RetainBasis:
    """Ordered, incrementally grown orthonormal basis in whitened coordinates.

    Single-writer: one experiment loop owns and mutates it.  Projections do
    not mutate and may be called freely between mutations.
    """

    def __init__(self, dim: int, rank_cap: int = 16,
                 residual_keep_thresh: float = 0.1):
        if dim < 1:
            raise ValueError("dimension must be >= 1")
        if rank_cap < 1:
            raise ValueError("rank_cap must be >= 1")
        if residual_keep_thresh < 0.0:
            raise ValueError("residual_keep_thresh must be >= 0")
        self.dim = int(dim)
        self.rank_cap = int(rank_cap)
        self.residual_keep_thresh = float(residual_keep_thresh)
        self.insert_count = 0
        self._u = np.empty((self.dim, 0), dtype=np.float64)

    @property
    def rank(self) -> int:
        return self._u.shape[1]

    @property
    def columns(self) -> list[np.ndarray]:
        return [self._u[:, j].copy() for j in range(self.rank)]

    def matrix(self) -> np.ndarray:
        """(dim, rank) column-stacked copy of the basis."""
        return self._u.copy()

    def _check(self, v) -> np.ndarray:
        vv = np.asarray(v, dtype=np.float64)
        if vv.ndim != 1 or vv.shape[0] != self.dim:
            raise ValueError(
                f"vector has shape {vv.shape}, basis dimension is {self.dim}"
            )
        return vv

    def insert_retain_gradient(self, whitened_retain_grad) -> tuple[bool, float]:
        """Try to grow the basis with one whitened retain gradient.

        Returns ``(inserted, residual_ratio)`` where the ratio is the
        relative Gram-Schmidt residual of the input against the current
        columns.  Insertion happens only if the ratio exceeds the keep
        threshold and the rank cap leaves room; an accepted column gets a
        second orthogonalization sweep before normalization.
        """
        g = self._check(whitened_retain_grad)
        if not np.all(np.isfinite(g)):
            raise ValueError("retain gradient must be finite")
        gnorm = np.linalg.norm(g)
        if gnorm == 0.0:
            return False, 0.0
        res = g - self._u @ (self._u.T @ g)
        ratio = float(np.linalg.norm(res) / gnorm)
        if ratio <= self.residual_keep_thresh or self.rank >= self.rank_cap:
            return False, ratio
        # second sweep guards orthogonality when the residual is small
        res = res - self._u @ (self._u.T @ res)
        rnorm = np.linalg.norm(res)
        if rnorm <= _DEGENERATE_RESIDUAL * gnorm:
            return False, ratio
        self._u = np.column_stack([self._u, res / rnorm])
        self.insert_count += 1
        return True, ratio

    def project_tangent(self, v_whitened) -> np.ndarray:
        """Component of ``v`` inside the basis span (whitened coordinates)."""
        v = self._check(v_whitened)
        if self.rank == 0:
            return np.zeros_like(v)
        return self._u @ (self._u.T @ v)

    def project_normal(self, v_whitened) -> np.ndarray:
        """Component of ``v`` orthogonal to every basis column."""
        v = self._check(v_whitened)
        if self.rank == 0:
            return v.copy()
        return v - self._u @ (self._u.T @ v)

    def entanglement(self, forget_grad_whitened) -> float:
        """Norm of the tangential component of a whitened forget gradient.

        Equals the metric norm of the raw-coordinate tangential projection,
        and vanishes iff the gradient is orthogonal to the basis span.
        """
        return float(np.linalg.norm(self.project_tangent(forget_grad_whitened)))

    def coefficients(self, v_whitened) -> np.ndarray:
        """Per-column inner products ``u_i . v``."""
        v = self._check(v_whitened)
        return self._u.T @ v

    def rebuild(self, whitened_vectors) -> None:
        """Discard all columns and re-insert the given vectors in order.

        Used when the metric is refreshed: stale whitened columns are not
        re-whitened (that would destroy orthonormality), the basis is grown
        again from a buffer of recent gradients.
        """
        self._u = np.empty((self.dim, 0), dtype=np.float64)
        for v in whitened_vectors:
            self.insert_retain_gradient(v)

    def orthonormality_defect(self) -> float:
        """max |U^T U - I|, for diagnostics and tests."""
        if self.rank == 0:
            return 0.0
        gram = self._u.T @ self._u
        return float(np.max(np.abs(gram - np.eye(self.rank))))

    # -- text snapshot format: one column per line, space-separated decimals

    def to_text(self) -> str:
        buf = io.StringIO()
        buf.write(f"# dim={self.dim} rank_cap={self.rank_cap} "
                  f"residual_keep_thresh={self.residual_keep_thresh!r} "
                  f"insert_count={self.insert_count}\n")
        for j in range(self.rank):
            buf.write(" ".join(format(x, ".17g") for x in self._u[:, j]))
            buf.write("\n")
        return buf.getvalue()

    @classmethod
    def from_text(cls, text: str) -> "RetainBasis":
        lines = [ln for ln in text.splitlines() if ln.strip()]
        if not lines or not lines[0].startswith("#"):
            raise ValueError("missing basis header line")
        meta = dict(tok.split("=", 1) for tok in lines[0][1:].split())
        basis = cls(
            dim=int(meta["dim"]),
            rank_cap=int(meta["rank_cap"]),
            residual_keep_thresh=float(meta["residual_keep_thresh"]),
        )
        cols = [np.array([float(t) for t in ln.split()]) for ln in lines[1:]]
        if cols:
            for c in cols:
                if c.shape[0] != basis.dim:
                    raise ValueError("column length does not match dimension")
            basis._u = np.column_stack(cols)
        basis.insert_count = int(meta["insert_count"])
        return basis


def principal_angle_diagnostic(basis_a: RetainBasis, basis_b: RetainBasis) -> float:
    """sin of the largest principal angle between two basis spans.

    Computed from the singular values of the cross-Gram matrix of the two
    orthonormal column sets: ``sin = sqrt(1 - sigma_min^2)``.
    """
    if basis_a.dim != basis_b.dim:
        raise ValueError("bases live in different dimensions")
    if basis_a.rank == 0 or basis_b.rank == 0:
        raise ValueError("principal angles need two nonempty bases")
    gram = basis_a.matrix().T @ basis_b.matrix()
    sigma = np.linalg.svd(gram, compute_uv=False)
    smin = float(np.clip(sigma.min(), 0.0, 1.0))
    return float(np.sqrt(max(0.0, 1.0 - smin * smin)))
