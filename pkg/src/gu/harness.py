"""Episode runner, theory audit, and variant comparison.

An episode repeatedly: snapshots the metric, evaluates losses and the
retain anchor, recovers the forget gradient from the combined one,
maintains the whitened retain basis on its refresh schedule, composes the
projected update (or takes the analysis-form split step), and records what
the first-order theory predicted next to what actually happened.
"""

from __future__ import annotations

import io
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from .analysis import (
    FirstOrderReport,
    descent_stepsize_bound,
    finite_difference_directional,
    nonpositivity_conditions,
    predicted_joint_change,
)
from .metric import DiagonalMetric, h_gradient, identity_metric
from .metric import norm as metric_norm
from .metric import whiten
from .models import (
    CrossEntropyObjective,
    FeedForwardNet,
    ForgetRetainTask,
    NegatedObjective,
    QuadraticObjective,
    kl_retain_anchor,
    make_task,
)
from .optimizer import AdaptiveState, adaptive_step, sgd_step, snapshot_metric, update_moments
from .step import GradientBundle, GUConfig, compose_gu_direction, recover_forget_gradient, split_step_direction
from .subspace import RetainBasis

__all__ = [
    "VARIANTS",
    "MODELS",
    "OPTIMIZERS",
    "CSV_COLUMNS",
    "EpisodeConfig",
    "StepRow",
    "EpisodeRecord",
    "EpisodeComponents",
    "AuditTolerances",
    "AuditViolation",
    "AuditReport",
    "ComparisonTable",
    "build_components",
    "run_episode",
    "theory_audit",
    "compare_variants",
]

VARIANTS = ("no_projection", "gu_projection", "gu_sign_aware", "split_theory_step")
MODELS = ("quadratic", "logistic", "mlp")
OPTIMIZERS = ("sgd", "adam")

CSV_COLUMNS = (
    "step", "L_f", "L_r", "kl_anchor", "entanglement",
    "predicted_retain_change", "actual_retain_change",
    "predicted_joint_change", "basis_rank", "cap_applied", "kept_count",
)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


@dataclass(frozen=True)
class EpisodeConfig:
    """Everything needed to reproduce one unlearning episode."""

    dimension: int = 8
    forget_count: int = 8
    retain_count: int = 16
    overlap: float = 0.5
    seed: int = 0
    model: str = "mlp"
    optimizer: str = "sgd"
    learning_rate: float = 0.1
    steps: int = 100
    variant: str = "gu_projection"
    hidden_width: int = 16
    pretrain_steps: int = 300
    pretrain_lr: float = 0.5
    pretrain_target: float = 0.25
    gu: GUConfig = field(default_factory=GUConfig)

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("step budget must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if self.model not in MODELS:
            raise ValueError(f"model must be one of {MODELS}")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {OPTIMIZERS}")
        if not self.learning_rate > 0.0:
            raise ValueError("learning_rate must be > 0")
        if self.pretrain_steps < 0:
            raise ValueError("pretrain_steps must be >= 0")


@dataclass
class StepRow:
    """One recorded step; the leading fields form the CSV schema."""

    step: int
    forget_loss: float
    retain_loss: float
    kl_anchor: float
    entanglement: float
    predicted_retain_change: float
    actual_retain_change: float
    predicted_joint_change: float
    basis_rank: int
    cap_applied: bool
    kept_count: int
    # audit extras (not serialized to the episode CSV)
    direct_joint_change: float = np.nan
    retain_energy: float = np.nan
    perp_energy: float = np.nan
    tangent_energy: float = np.nan
    cross_term: float = np.nan
    descent_bound: float = np.nan
    step_h_norm_sq: float = np.nan
    lipschitz_r: float = np.nan
    case_b: bool | None = None
    case_c: bool = False
    tangential_keep_norm: float = 0.0
    normal_norm: float = np.nan
    forget_whitened_norm: float = np.nan

    def csv_values(self):
        return (
            str(self.step), _fmt(self.forget_loss), _fmt(self.retain_loss),
            _fmt(self.kl_anchor), _fmt(self.entanglement),
            _fmt(self.predicted_retain_change), _fmt(self.actual_retain_change),
            _fmt(self.predicted_joint_change), str(self.basis_rank),
            str(int(self.cap_applied)), str(self.kept_count),
        )


@dataclass
class EpisodeComponents:
    """Deterministically built model pieces of one episode."""

    param_dim: int
    theta0: np.ndarray
    theta_ref: np.ndarray | None
    forget_term: object
    retain_metric: object
    anchor: object
    task: ForgetRetainTask | None
    net: FeedForwardNet | None

    def anchor_lipschitz(self, metric: DiagonalMetric) -> float:
        if isinstance(self.anchor, QuadraticObjective):
            return self.anchor.lipschitz_h(metric)
        return float("nan")


@dataclass
class EpisodeRecord:
    config: EpisodeConfig
    rows: list[StepRow]
    thetas: list[np.ndarray]
    deltas: list[np.ndarray]
    status: str = "ok"
    delta_forget_loss: float = np.nan
    delta_retain_loss: float = np.nan
    delta_kl_anchor: float = np.nan
    mean_entanglement: float = np.nan
    max_first_order_error: float = np.nan
    basis_rank_history: list[int] = field(default_factory=list)

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        flat = config_to_flat(self.config)
        echo = " ".join(f"{k}={flat[k]}" for k in sorted(flat))
        buf.write(f"# {echo}\n")
        buf.write(f"# status={self.status}\n")
        buf.write(",".join(CSV_COLUMNS) + "\n")
        for row in self.rows:
            buf.write(",".join(row.csv_values()) + "\n")
        return buf.getvalue()


def config_to_flat(cfg: EpisodeConfig) -> dict[str, str]:
    """Flatten a config to the key=value form used by files and headers."""
    out: dict[str, str] = {}
    for name in ("dimension", "forget_count", "retain_count", "seed", "steps",
                 "hidden_width", "pretrain_steps"):
        out[name] = str(getattr(cfg, name))
    for name in ("overlap", "learning_rate", "pretrain_lr", "pretrain_target"):
        out[name] = repr(getattr(cfg, name))
    for name in ("model", "optimizer", "variant"):
        out[name] = getattr(cfg, name)
    g = cfg.gu
    for name in ("gamma", "alpha", "beta", "kappa", "tau", "rho",
                 "residual_keep_thresh"):
        out[f"gu.{name}"] = repr(getattr(g, name))
    for name in ("rank_cap", "refresh_period"):
        out[f"gu.{name}"] = str(getattr(g, name))
    out["gu.sign_aware"] = "true" if g.sign_aware else "false"
    out["gu.metric_bias_corrected"] = "true" if g.metric_bias_corrected else "false"
    return out


def config_from_flat(flat: dict[str, str]) -> EpisodeConfig:
    """Inverse of :func:`config_to_flat`; unknown keys are rejected."""
    known_int = {"dimension", "forget_count", "retain_count", "seed", "steps",
                 "hidden_width", "pretrain_steps"}
    known_float = {"overlap", "learning_rate", "pretrain_lr", "pretrain_target"}
    known_str = {"model", "optimizer", "variant"}
    gu_float = {"gamma", "alpha", "beta", "kappa", "tau", "rho",
                "residual_keep_thresh"}
    gu_int = {"rank_cap", "refresh_period"}
    gu_bool = {"sign_aware", "metric_bias_corrected"}

    kwargs: dict = {}
    gu_kwargs: dict = {}
    for key, raw in flat.items():
        if key in known_int:
            kwargs[key] = int(raw)
        elif key in known_float:
            kwargs[key] = float(raw)
        elif key in known_str:
            kwargs[key] = raw
        elif key.startswith("gu."):
            sub = key[3:]
            if sub in gu_float:
                gu_kwargs[sub] = float(raw)
            elif sub in gu_int:
                gu_kwargs[sub] = int(raw)
            elif sub in gu_bool:
                if raw not in ("true", "false"):
                    raise ValueError(f"boolean key {key} must be true/false")
                gu_kwargs[sub] = raw == "true"
            else:
                raise ValueError(f"unknown config key: {key}")
        else:
            raise ValueError(f"unknown config key: {key}")
    return EpisodeConfig(gu=GUConfig(**gu_kwargs), **kwargs)


def build_components(cfg: EpisodeConfig) -> EpisodeComponents:
    """Construct the episode's objectives, deterministic in the seed.

    For probabilistic models the parameters are pretrained on the union of
    both sample sets; the pretrained point doubles as the frozen anchor
    reference, which makes the anchor gradient exactly zero on step 0.
    """
    if cfg.model == "quadratic":
        rng = np.random.default_rng([cfg.seed, 0])
        p = cfg.dimension
        forget = QuadraticObjective(rng.normal(size=p),
                                    rng.uniform(0.5, 2.5, size=p))
        retain = QuadraticObjective(rng.normal(size=p),
                                    rng.uniform(0.5, 2.5, size=p))
        theta0 = rng.normal(size=p) * 1.5
        return EpisodeComponents(
            param_dim=p, theta0=theta0, theta_ref=None,
            forget_term=forget, retain_metric=retain, anchor=retain,
            task=None, net=None,
        )

    task = make_task(cfg.dimension, cfg.forget_count, cfg.retain_count,
                     cfg.overlap, cfg.seed)
    widths = ([cfg.dimension, 2] if cfg.model == "logistic"
              else [cfg.dimension, cfg.hidden_width, 2])
    net = FeedForwardNet(widths)
    rng = np.random.default_rng([cfg.seed, 1])
    theta = net.init_params(rng)
    pretrain = CrossEntropyObjective(net, task.retain_samples + task.forget_samples)
    for _ in range(cfg.pretrain_steps):
        # stop once both sets are learned to the target loss; a fully
        # saturated start point would leave no forget gradient to project
        if pretrain.loss(theta) <= cfg.pretrain_target:
            break
        theta = sgd_step(theta, pretrain.gradient(theta), cfg.pretrain_lr)
    theta_ref = theta.copy()
    task.reference_parameters = theta_ref
    return EpisodeComponents(
        param_dim=net.n_params,
        theta0=theta.copy(),
        theta_ref=theta_ref,
        forget_term=NegatedObjective(CrossEntropyObjective(net, task.forget_samples)),
        retain_metric=CrossEntropyObjective(net, task.retain_samples),
        anchor=kl_retain_anchor(net, theta_ref, task.retain_samples),
        task=task,
        net=net,
    )


def _basis_vector(raw_retain_grad: np.ndarray, metric: DiagonalMetric,
                  theory_form: bool) -> np.ndarray:
    # practical form spans whitened raw gradients; the analysis form needs
    # the whitened representation of the metric gradient instead, so that
    # the step's own retain gradient lies in the span it is projected with
    if theory_form:
        return whiten(h_gradient(raw_retain_grad, metric), metric)
    return whiten(raw_retain_grad, metric)


def run_episode(cfg: EpisodeConfig) -> EpisodeRecord:
    """Execute one episode; deterministic given the config."""
    comps = build_components(cfg)
    gu = cfg.gu
    if cfg.variant == "gu_sign_aware":
        gu = gu.with_sign_aware(True)
    elif cfg.variant == "gu_projection":
        gu = gu.with_sign_aware(False)
    theory = cfg.variant == "split_theory_step"

    theta = comps.theta0.copy()
    p = comps.param_dim
    adam = (AdaptiveState.init(p, learning_rate=cfg.learning_rate,
                               bias_corrected_metric=gu.metric_bias_corrected)
            if cfg.optimizer == "adam" else None)
    basis = RetainBasis(p, gu.rank_cap, gu.residual_keep_thresh)
    buffer: deque[np.ndarray] = deque(maxlen=gu.rank_cap)

    record = EpisodeRecord(config=cfg, rows=[], thetas=[], deltas=[])
    initial = None

    for t in range(cfg.steps):
        metric = snapshot_metric(adam) if adam is not None else identity_metric(p)
        loss_f = comps.forget_term.loss(theta)
        loss_r = comps.retain_metric.loss(theta)
        loss_a = comps.anchor.loss(theta)
        if not (np.isfinite(loss_f) and np.isfinite(loss_r) and np.isfinite(loss_a)):
            record.status = "nonfinite"
            break
        if initial is None:
            initial = (loss_f, loss_r, loss_a)

        g_r = comps.anchor.gradient(theta)
        g_tot = gu.gamma * comps.forget_term.gradient(theta) + gu.alpha * g_r
        if not (np.all(np.isfinite(g_r)) and np.all(np.isfinite(g_tot))):
            record.status = "nonfinite"
            break
        g_f = recover_forget_gradient(g_tot, g_r, gu)

        if float(np.linalg.norm(g_r)) > 0.0:
            buffer.append(g_r.copy())
        if t % gu.refresh_period == 0:
            basis.rebuild(_basis_vector(v, metric, theory)
                          for v in reversed(buffer))

        g_f_whitened = whiten(g_f, metric)
        entanglement = basis.entanglement(g_f_whitened)

        row = StepRow(
            step=t, forget_loss=loss_f, retain_loss=loss_r, kl_anchor=loss_a,
            entanglement=entanglement, predicted_retain_change=0.0,
            actual_retain_change=0.0, predicted_joint_change=0.0,
            basis_rank=basis.rank, cap_applied=False, kept_count=0,
        )
        row.forget_whitened_norm = float(np.linalg.norm(g_f_whitened))

        if theory:
            g_f_h = h_gradient(g_f, metric)
            g_r_h = h_gradient(g_r, metric)
            delta = split_step_direction(g_f_h, g_r_h, basis, metric,
                                         gu.rho, gu.beta)
            theta_new = theta + delta
            fo = predicted_joint_change(gu.rho, gu.alpha, gu.beta,
                                        g_f_h, g_r_h, basis, metric)
            flags = nonpositivity_conditions(gu.alpha, gu.beta, fo)
            lip = comps.anchor_lipschitz(metric)
            row.predicted_retain_change = fo.predicted_retain_change
            row.predicted_joint_change = fo.predicted_joint_change
            row.direct_joint_change = float(np.dot(g_f + gu.alpha * g_r, delta))
            row.retain_energy = fo.retain_energy
            row.perp_energy = fo.perp_energy
            row.tangent_energy = fo.tangent_energy
            row.cross_term = fo.cross_term
            row.lipschitz_r = lip
            row.descent_bound = (descent_stepsize_bound(
                gu.beta, fo.retain_energy, fo.perp_energy, lip)
                if np.isfinite(lip) and gu.beta > 0.0 else np.nan)
            row.step_h_norm_sq = metric_norm(delta, metric) ** 2
            row.case_b = flags.case_b
            row.case_c = flags.case_c
            if adam is not None:
                adam = update_moments(adam, g_tot)
        else:
            if cfg.variant == "no_projection":
                direction = g_tot
            else:
                bundle = GradientBundle.from_observed(g_tot, g_r, metric, gu)
                rep = compose_gu_direction(bundle, basis, metric, gu)
                direction = rep.direction
                row.cap_applied = rep.cap_applied
                row.kept_count = len(rep.kept_index_set)
                row.tangential_keep_norm = rep.tangential_keep_norm
                row.normal_norm = rep.normal_norm
            if adam is not None:
                theta_new, adam = adaptive_step(adam, theta, direction)
            else:
                theta_new = sgd_step(theta, direction, cfg.learning_rate)
            delta = theta_new - theta
            row.predicted_retain_change = float(np.dot(g_r, delta))
            row.predicted_joint_change = float(np.dot(g_tot, delta))
            row.step_h_norm_sq = metric_norm(delta, metric) ** 2

        anchor_after = comps.anchor.loss(theta_new)
        row.actual_retain_change = float(anchor_after - loss_a)

        record.rows.append(row)
        record.thetas.append(theta.copy())
        record.deltas.append(delta.copy())
        record.basis_rank_history.append(basis.rank)
        theta = theta_new

    if record.rows and initial is not None and record.status == "ok":
        final_f = comps.forget_term.loss(theta)
        final_r = comps.retain_metric.loss(theta)
        final_a = comps.anchor.loss(theta)
        if np.isfinite(final_f) and np.isfinite(final_r) and np.isfinite(final_a):
            record.delta_forget_loss = float(final_f - initial[0])
            record.delta_retain_loss = float(final_r - initial[1])
            record.delta_kl_anchor = float(final_a - initial[2])
        else:
            record.status = "nonfinite"
    if record.rows:
        record.mean_entanglement = float(
            np.mean([r.entanglement for r in record.rows]))
        record.max_first_order_error = float(
            np.max([abs(r.actual_retain_change - r.predicted_retain_change)
                    for r in record.rows]))
    return record


# ---------------------------------------------------------------------------
# theory audit


@dataclass(frozen=True)
class AuditTolerances:
    fd_step: float = 1e-5
    first_order_rel: float = 1e-6
    first_order_abs: float = 1e-9
    joint_rel: float = 1e-9
    nonpos_abs: float = 1e-12


@dataclass(frozen=True)
class AuditViolation:
    step: int
    check: str
    measured: float
    allowed: float


@dataclass
class AuditReport:
    checks_run: dict[str, int]
    violations: list[AuditViolation]
    worst_error: dict[str, float]

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("check,steps_checked,violations,worst_error\n")
        for name in sorted(self.checks_run):
            n_viol = sum(1 for v in self.violations if v.check == name)
            buf.write(f"{name},{self.checks_run[name]},{n_viol},"
                      f"{_fmt(self.worst_error.get(name, 0.0))}\n")
        return buf.getvalue()


def theory_audit(record: EpisodeRecord, anchor=None,
                 tolerances: AuditTolerances | None = None) -> AuditReport:
    """Check every recorded step of an analysis-form episode.

    Four checks per step: the first-order retain prediction against a
    central finite difference, strict anchor descent whenever the step size
    sits below the smoothness bound, the exact joint identity against the
    direct inner product, and the sufficient nonpositivity conditions
    against the predicted joint change.
    """
    if record.config.variant != "split_theory_step":
        raise ValueError("theory audit is defined for split_theory_step records")
    tol = tolerances or AuditTolerances()
    if anchor is None:
        anchor = build_components(record.config).anchor

    rho = record.config.gu.rho
    beta = record.config.gu.beta
    checks = {"first_order": 0, "descent": 0, "joint_identity": 0,
              "nonpos_conditions": 0}
    worst = {k: 0.0 for k in checks}
    violations: list[AuditViolation] = []

    for row, theta, delta in zip(record.rows, record.thetas, record.deltas):
        fd = finite_difference_directional(anchor, theta, delta, tol.fd_step)
        err = abs(fd - row.predicted_retain_change)
        allowed = (tol.first_order_rel * max(abs(fd), abs(row.predicted_retain_change))
                   + tol.first_order_abs * (1.0 + abs(row.kl_anchor)))
        checks["first_order"] += 1
        worst["first_order"] = max(worst["first_order"], err)
        if err > allowed:
            violations.append(AuditViolation(row.step, "first_order", err, allowed))

        if beta > 0.0 and np.isfinite(row.descent_bound) and rho < row.descent_bound:
            checks["descent"] += 1
            worst["descent"] = max(worst["descent"], row.actual_retain_change)
            if not row.actual_retain_change < 0.0:
                violations.append(AuditViolation(
                    row.step, "descent", row.actual_retain_change, 0.0))

        scale = max(abs(row.direct_joint_change), abs(row.predicted_joint_change),
                    rho * (row.perp_energy + row.retain_energy + abs(row.cross_term)))
        err = abs(row.predicted_joint_change - row.direct_joint_change)
        allowed = tol.joint_rel * max(scale, 1e-300)
        checks["joint_identity"] += 1
        worst["joint_identity"] = max(worst["joint_identity"], err)
        if err > allowed:
            violations.append(AuditViolation(row.step, "joint_identity", err, allowed))

        if bool(row.case_b) or row.case_c:
            checks["nonpos_conditions"] += 1
            slack = tol.nonpos_abs * (1.0 + rho * (
                row.perp_energy + row.retain_energy + row.tangent_energy))
            worst["nonpos_conditions"] = max(worst["nonpos_conditions"],
                                             row.predicted_joint_change)
            if row.predicted_joint_change > slack:
                violations.append(AuditViolation(
                    row.step, "nonpos_conditions", row.predicted_joint_change, slack))

    return AuditReport(checks_run=checks, violations=violations, worst_error=worst)


# ---------------------------------------------------------------------------
# variant comparison


@dataclass
class ComparisonTable:
    rows: list[dict]

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        buf.write("variant,delta_forget_loss,delta_retain_loss,"
                  "mean_entanglement,status\n")
        for r in self.rows:
            buf.write(f"{r['variant']},{_fmt(r['delta_forget_loss'])},"
                      f"{_fmt(r['delta_retain_loss'])},"
                      f"{_fmt(r['mean_entanglement'])},{r['status']}\n")
        return buf.getvalue()


def compare_variants(cfg_base: EpisodeConfig, variants) -> ComparisonTable:
    """Run each variant on the same task seed and tabulate the outcomes.

    Entries may be variant names or full configs; a config with a different
    seed is rejected since cross-seed rows are not comparable.
    """
    rows = []
    for v in variants:
        if isinstance(v, EpisodeConfig):
            if v.seed != cfg_base.seed:
                raise ValueError("mismatched seeds across compared variants")
            cfg = v
        else:
            cfg = replace(cfg_base, variant=str(v))
        rec = run_episode(cfg)
        rows.append({
            "variant": cfg.variant,
            "delta_forget_loss": rec.delta_forget_loss,
            "delta_retain_loss": rec.delta_retain_loss,
            "mean_entanglement": rec.mean_entanglement,
            "status": rec.status,
        })
    return ComparisonTable(rows=rows)
