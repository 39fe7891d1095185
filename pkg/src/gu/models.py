"""Desk-scale differentiable objectives with analytic gradients.

Everything here works on a flat parameter vector so the projection
machinery can treat models uniformly.  Gradients are hand-derived and each
concrete objective is validated against central finite differences in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

from .metric import DiagonalMetric

__all__ = [
    "DifferentiableObjective",
    "QuadraticObjective",
    "LogisticObjective",
    "FeedForwardNet",
    "CrossEntropyObjective",
    "MeanSquaredErrorObjective",
    "KLAnchorObjective",
    "NegatedObjective",
    "ForgetRetainTask",
    "quadratic_objective",
    "logistic_objective",
    "mlp_objective",
    "kl_retain_anchor",
    "make_task",
]

_KL_FLOOR = 1e-12


@runtime_checkable
class DifferentiableObjective(Protocol):
    def loss(self, theta: np.ndarray) -> float: ...
    def gradient(self, theta: np.ndarray) -> np.ndarray: ...


class QuadraticObjective:
    """Separable quadratic ``0.5 * sum_i c_i (theta_i - a_i)^2``.

    The metric Lipschitz constant of its preconditioned gradient is exact:
    ``max_i c_i / h_i``.
    """

    def __init__(self, center, curvature_diag):
        self.center = np.asarray(center, dtype=np.float64)
        self.curvature = np.asarray(curvature_diag, dtype=np.float64)
        if self.center.shape != self.curvature.shape or self.center.ndim != 1:
            raise ValueError("center and curvature must be matching vectors")
        if np.any(self.curvature <= 0.0):
            raise ValueError("curvature entries must be > 0")

    @property
    def dim(self) -> int:
        return self.center.shape[0]

    def loss(self, theta) -> float:
        d = np.asarray(theta, dtype=np.float64) - self.center
        return 0.5 * float(np.dot(self.curvature * d, d))

    def gradient(self, theta) -> np.ndarray:
        return self.curvature * (np.asarray(theta, dtype=np.float64) - self.center)

    def lipschitz_h(self, metric: DiagonalMetric) -> float:
        return float(np.max(self.curvature / metric.diag_h))


class LogisticObjective:
    """Mean binary cross-entropy of a bias-free linear classifier."""

    def __init__(self, samples: Sequence[tuple[np.ndarray, int]]):
        if len(samples) == 0:
            raise ValueError("need at least one sample")
        self.inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in samples])
        self.labels = np.array([float(y) for _, y in samples])
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be vectors of one common dimension")
        if not np.all((self.labels == 0.0) | (self.labels == 1.0)):
            raise ValueError("labels must be binary")

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def loss(self, theta) -> float:
        z = self.inputs @ np.asarray(theta, dtype=np.float64)
        # softplus(z) - y*z is the stable BCE-with-logits form
        return float(np.mean(np.logaddexp(0.0, z) - self.labels * z))

    def gradient(self, theta) -> np.ndarray:
        z = self.inputs @ np.asarray(theta, dtype=np.float64)
        p = 1.0 / (1.0 + np.exp(-z))
        return (self.inputs.T @ (p - self.labels)) / self.labels.shape[0]


class FeedForwardNet:
    """Fully connected net on a flat parameter vector, tanh hidden layers.

    ``widths`` lists layer sizes from input to output; zero hidden layers
    makes it a plain linear map.  Backpropagation is written out by hand so
    objectives can push arbitrary output-side derivatives through it.
    """

    def __init__(self, widths: Sequence[int], activation: str = "tanh"):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError("widths must list at least input and output sizes")
        if activation != "tanh":
            raise ValueError("only the tanh activation is supported")
        self.widths = widths
        self._shapes = [(widths[i], widths[i + 1]) for i in range(len(widths) - 1)]
        self.n_params = sum((fan_in + 1) * fan_out for fan_in, fan_out in self._shapes)

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        parts = []
        for fan_in, fan_out in self._shapes:
            parts.append(rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=fan_in * fan_out))
            parts.append(np.zeros(fan_out))
        return np.concatenate(parts)

    def _unpack(self, theta: np.ndarray):
        layers = []
        off = 0
        for fan_in, fan_out in self._shapes:
            w = theta[off:off + fan_in * fan_out].reshape(fan_in, fan_out)
            off += fan_in * fan_out
            b = theta[off:off + fan_out]
            off += fan_out
            layers.append((w, b))
        return layers

    def forward(self, theta: np.ndarray, x: np.ndarray):
        """Returns final logits (n, out) and per-layer activation cache."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape[0] != self.n_params:
            raise ValueError("parameter vector has the wrong length")
        h = np.asarray(x, dtype=np.float64)
        cache = [h]
        layers = self._unpack(theta)
        for k, (w, b) in enumerate(layers):
            z = h @ w + b
            h = np.tanh(z) if k < len(layers) - 1 else z
            cache.append(h)
        return h, cache

    def backprop(self, theta: np.ndarray, cache, d_out: np.ndarray) -> np.ndarray:
        """Gradient of ``sum(d_out * logits)`` w.r.t. the flat parameters."""
        layers = self._unpack(np.asarray(theta, dtype=np.float64))
        grads = [None] * len(layers)
        delta = np.asarray(d_out, dtype=np.float64)
        for k in range(len(layers) - 1, -1, -1):
            w, _ = layers[k]
            h_in = cache[k]
            grads[k] = (h_in.T @ delta, delta.sum(axis=0))
            if k > 0:
                # tanh'(z) = 1 - tanh(z)^2, and cache[k] stores tanh(z)
                delta = (delta @ w.T) * (1.0 - cache[k] ** 2)
        return np.concatenate([np.concatenate([gw.ravel(), gb]) for gw, gb in grads])

    def predict_log_proba(self, theta: np.ndarray, x: np.ndarray):
        logits, cache = self.forward(theta, x)
        logz = logits - logits.max(axis=1, keepdims=True)
        log_p = logz - np.log(np.exp(logz).sum(axis=1, keepdims=True))
        return log_p, cache


class CrossEntropyObjective:
    """Mean softmax cross-entropy of a feed-forward net on labelled samples."""

    def __init__(self, net: FeedForwardNet, samples: Sequence[tuple[np.ndarray, int]]):
        if len(samples) == 0:
            raise ValueError("need at least one sample")
        self.net = net
        self.inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in samples])
        self.labels = np.array([int(y) for _, y in samples])
        if self.inputs.shape[1] != net.widths[0]:
            raise ValueError("sample dimension does not match the net input width")
        if np.any(self.labels < 0) or np.any(self.labels >= net.widths[-1]):
            raise ValueError("label out of range for the output width")

    def loss(self, theta) -> float:
        log_p, _ = self.net.predict_log_proba(theta, self.inputs)
        n = self.labels.shape[0]
        return -float(np.mean(log_p[np.arange(n), self.labels]))

    def gradient(self, theta) -> np.ndarray:
        log_p, cache = self.net.predict_log_proba(theta, self.inputs)
        p = np.exp(log_p)
        n = self.labels.shape[0]
        d_logits = p.copy()
        d_logits[np.arange(n), self.labels] -= 1.0
        return self.net.backprop(theta, cache, d_logits / n)


class MeanSquaredErrorObjective:
    """Mean ``0.5 * |f(x) - y|^2`` of a feed-forward net."""

    def __init__(self, net: FeedForwardNet,
                 samples: Sequence[tuple[np.ndarray, np.ndarray]]):
        if len(samples) == 0:
            raise ValueError("need at least one sample")
        self.net = net
        self.inputs = np.stack([np.asarray(x, dtype=np.float64) for x, _ in samples])
        self.targets = np.stack(
            [np.atleast_1d(np.asarray(y, dtype=np.float64)) for _, y in samples])
        if self.inputs.shape[1] != net.widths[0]:
            raise ValueError("sample dimension does not match the net input width")
        if self.targets.shape[1] != net.widths[-1]:
            raise ValueError("target dimension does not match the net output width")

    def loss(self, theta) -> float:
        out, _ = self.net.forward(theta, self.inputs)
        return 0.5 * float(np.mean(np.sum((out - self.targets) ** 2, axis=1)))

    def gradient(self, theta) -> np.ndarray:
        out, cache = self.net.forward(theta, self.inputs)
        d_out = (out - self.targets) / self.inputs.shape[0]
        return self.net.backprop(theta, cache, d_out)


class KLAnchorObjective:
    """Mean KL from a frozen reference distribution over retain inputs.

    Loss and gradient are exactly zero at the reference parameters.  If the
    reference assigns less than the probability floor to some class, that
    class is clamped and the event counted in ``clamp_events`` so callers
    can exclude clamped evaluations.
    """

    def __init__(self, net: FeedForwardNet, theta_ref, inputs):
        self.net = net
        self.theta_ref = np.asarray(theta_ref, dtype=np.float64).copy()
        self.inputs = np.asarray(inputs, dtype=np.float64)
        if self.inputs.ndim != 2:
            raise ValueError("inputs must be a (n, dim) array")
        log_q, _ = net.predict_log_proba(self.theta_ref, self.inputs)
        self.clamp_events = 0
        floor = np.log(_KL_FLOOR)
        if np.any(log_q < floor):
            self.clamp_events += int(np.sum(log_q < floor))
            log_q = np.maximum(log_q, floor)
        self._log_q = log_q

    def loss(self, theta) -> float:
        log_p, _ = self.net.predict_log_proba(theta, self.inputs)
        p = np.exp(log_p)
        return float(np.mean(np.sum(p * (log_p - self._log_q), axis=1)))

    def gradient(self, theta) -> np.ndarray:
        log_p, cache = self.net.predict_log_proba(theta, self.inputs)
        p = np.exp(log_p)
        s = log_p - self._log_q
        # dKL/dz_k = p_k * (s_k - sum_c p_c s_c) per sample
        d_logits = p * (s - np.sum(p * s, axis=1, keepdims=True))
        return self.net.backprop(theta, cache, d_logits / self.inputs.shape[0])


class NegatedObjective:
    """Sign flip of another objective; descending it ascends the original."""

    def __init__(self, inner: DifferentiableObjective):
        self.inner = inner

    def loss(self, theta) -> float:
        return -self.inner.loss(theta)

    def gradient(self, theta) -> np.ndarray:
        return -self.inner.gradient(theta)


@dataclass
class ForgetRetainTask:
    """Synthetic forget/retain populations with tunable gradient overlap."""

    forget_samples: list[tuple[np.ndarray, int]]
    retain_samples: list[tuple[np.ndarray, int]]
    seed: int
    dimension: int
    overlap: float
    reference_parameters: np.ndarray | None = None

    def forget_inputs(self) -> np.ndarray:
        return np.stack([x for x, _ in self.forget_samples])

    def retain_inputs(self) -> np.ndarray:
        return np.stack([x for x, _ in self.retain_samples])

    def to_text(self) -> str:
        return (f"seed={self.seed} dimension={self.dimension} "
                f"forget_count={len(self.forget_samples)} "
                f"retain_count={len(self.retain_samples)} "
                f"overlap={self.overlap!r}\n")

    @classmethod
    def from_text(cls, text: str) -> "ForgetRetainTask":
        meta = dict(tok.split("=", 1) for tok in text.split())
        return make_task(
            dimension=int(meta["dimension"]),
            forget_count=int(meta["forget_count"]),
            retain_count=int(meta["retain_count"]),
            overlap=float(meta["overlap"]),
            seed=int(meta["seed"]),
        )


def quadratic_objective(center, curvature_diag) -> QuadraticObjective:
    return QuadraticObjective(center, curvature_diag)


def logistic_objective(samples) -> LogisticObjective:
    return LogisticObjective(samples)


def mlp_objective(widths, samples, activation: str = "tanh",
                  loss: str = "mse"):
    """Feed-forward objective with manual backpropagation.

    ``loss`` selects mean squared error (targets are vectors) or softmax
    cross-entropy (targets are integer labels).
    """
    if len(widths) < 3:
        raise ValueError("need at least one hidden layer")
    net = FeedForwardNet(widths, activation=activation)
    if loss == "mse":
        return MeanSquaredErrorObjective(net, samples)
    if loss == "cross_entropy":
        return CrossEntropyObjective(net, samples)
    raise ValueError(f"unknown loss kind: {loss!r}")


def kl_retain_anchor(net: FeedForwardNet, theta_ref,
                     retain_samples) -> KLAnchorObjective:
    """Retain anchor: KL(model || frozen reference) averaged over inputs."""
    inputs = np.stack([np.asarray(x, dtype=np.float64)
                       for x, _ in retain_samples])
    return KLAnchorObjective(net, theta_ref, inputs)


def make_task(dimension: int, forget_count: int, retain_count: int,
              overlap: float, seed: int, retain_noise: float = 0.15,
              forget_noise: float = 0.6) -> ForgetRetainTask:
    """Generate a deterministic forget/retain task.

    Each set is a balanced binary discrimination along one mean direction:
    inputs are ``+/- mu + noise`` with the sign as the label.  ``overlap``
    is the cosine similarity between the forget and retain mean directions,
    so it directly tunes how entangled the two sets' gradients are: 0 gives
    orthogonal populations, 1 identical ones.

    The retain population is kept tight (one coherent capability) while
    forget samples scatter more widely (idiosyncratic items to erase), so
    forget gradients carry structure outside the retain-sensitive subspace
    even at high overlap.
    """
    if forget_count < 1 or retain_count < 1:
        raise ValueError("sample counts must be >= 1")
    if not 0.0 <= overlap <= 1.0:
        raise ValueError("overlap must lie in [0, 1]")
    if dimension < 2:
        raise ValueError("need dimension >= 2 to control overlap")
    rng = np.random.default_rng(seed)
    d_r = rng.normal(size=dimension)
    d_r /= np.linalg.norm(d_r)
    raw = rng.normal(size=dimension)
    raw -= d_r * np.dot(raw, d_r)
    d_perp = raw / np.linalg.norm(raw)
    d_f = overlap * d_r + np.sqrt(max(0.0, 1.0 - overlap ** 2)) * d_perp

    def draw(mean, count, noise):
        out = []
        for i in range(count):
            sign = 1 if i % 2 == 0 else -1
            out.append((sign * mean + noise * rng.normal(size=dimension),
                        1 if sign > 0 else 0))
        return out

    retain = draw(d_r, retain_count, retain_noise)
    forget = draw(d_f, forget_count, forget_noise)
    return ForgetRetainTask(
        forget_samples=forget,
        retain_samples=retain,
        seed=int(seed),
        dimension=int(dimension),
        overlap=float(overlap),
    )
