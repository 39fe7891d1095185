"""Metric-aware gradient disentanglement for unlearning.

Forget-gradient updates are decomposed against the span of recent retain
gradients under an optimizer-induced diagonal metric; only the component
that cannot move the retain loss at first order is executed, optionally
augmented by a sign-gated, trust-region-capped tangential term.  The
package bundles the projection machinery, closed-form first-order
calculators with independent oracles, desk-scale differentiable models,
and an episode harness plus CLI that verify every guarantee numerically.
"""

from .metric import (
    DiagonalMetric,
    dewhiten,
    h_gradient,
    identity_metric,
    inner,
    metric_from_second_moments,
    norm,
    whiten,
)
from .step import (
    GradientBundle,
    GUConfig,
    StepReport,
    cap_tangential,
    compose_gu_direction,
    recover_forget_gradient,
    sign_aware_select,
    sign_aware_split_step,
    split_step_direction,
)
from .subspace import RetainBasis, principal_angle_diagnostic

__all__ = [
    "DiagonalMetric",
    "metric_from_second_moments",
    "identity_metric",
    "inner",
    "norm",
    "whiten",
    "dewhiten",
    "h_gradient",
    "RetainBasis",
    "principal_angle_diagnostic",
    "GUConfig",
    "GradientBundle",
    "StepReport",
    "recover_forget_gradient",
    "sign_aware_select",
    "cap_tangential",
    "compose_gu_direction",
    "split_step_direction",
    "sign_aware_split_step",
]

__version__ = "0.1.0"
