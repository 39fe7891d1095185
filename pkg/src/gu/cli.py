"""Command-line front end: run episodes, audits, comparisons and sweeps.

Config files are flat ``key=value`` text, one pair per line, ``#`` comments
allowed.  Episode fields are addressed directly (``steps=200``), update
tunables with a ``gu.`` prefix (``gu.kappa=0.5``).  Two extra key families
drive the multi-run subcommands: ``compare.variants`` (comma list) and
``sweep.<axis>`` (comma list per axis, axes: kappa, tau, alpha, beta, rho,
overlap).
"""

from __future__ import annotations

import argparse
import itertools
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from .harness import (
    VARIANTS,
    EpisodeConfig,
    compare_variants,
    config_from_flat,
    run_episode,
    theory_audit,
)
from .selftest import run_selftest

SWEEP_AXES = ("kappa", "tau", "alpha", "beta", "rho", "overlap")


class ConfigError(ValueError):
    pass


def read_flat_config(path: str | Path) -> dict[str, str]:
    flat: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = stripped.split("=", 1)
        key = key.strip()
        if key in flat:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key}")
        flat[key] = value.strip()
    return flat


def episode_config_from_file(path, seed_override=None) -> tuple[EpisodeConfig, dict[str, str]]:
    flat = read_flat_config(path)
    extras = {k: v for k, v in flat.items()
              if k.startswith("compare.") or k.startswith("sweep.")}
    plain = {k: v for k, v in flat.items() if k not in extras}
    try:
        cfg = config_from_flat(plain)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config {path}: {exc}") from exc
    if seed_override is not None:
        cfg = replace(cfg, seed=int(seed_override))
    return cfg, extras


def _resolve_out(args) -> Path:
    out = args.out or os.environ.get("GU_OUT_DIR") or "./out"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _say(args, message: str) -> None:
    if not args.quiet:
        print(message)


def _cmd_run(args) -> int:
    cfg, _ = episode_config_from_file(args.config, args.seed)
    out = _resolve_out(args)
    record = run_episode(cfg)
    path = out / f"episode_seed{cfg.seed}_{cfg.variant}.csv"
    path.write_text(record.to_csv_text())
    _say(args, f"wrote {path} ({len(record.rows)} steps, status {record.status})")
    return 0 if record.status == "ok" else 1


def _cmd_audit(args) -> int:
    cfg, _ = episode_config_from_file(args.config, args.seed)
    if cfg.variant != "split_theory_step":
        print("audit requires variant=split_theory_step", file=sys.stderr)
        return 1
    out = _resolve_out(args)
    record = run_episode(cfg)
    (out / f"episode_seed{cfg.seed}_{cfg.variant}.csv").write_text(record.to_csv_text())
    report = theory_audit(record)
    path = out / f"audit_seed{cfg.seed}.csv"
    path.write_text(report.to_csv_text())
    _say(args, f"wrote {path} ({len(report.violations)} violations)")
    if record.status != "ok":
        return 1
    return 0 if report.passed else 1


def _parse_variants(extras, key="compare.variants"):
    raw = extras.get(key, "no_projection,gu_projection")
    variants = [v.strip() for v in raw.split(",") if v.strip()]
    for v in variants:
        if v not in VARIANTS:
            raise ConfigError(f"unknown variant in {key}: {v}")
    if not variants:
        raise ConfigError(f"{key} lists no variants")
    return variants


def _cmd_compare(args) -> int:
    cfg, extras = episode_config_from_file(args.config, args.seed)
    variants = _parse_variants(extras)
    out = _resolve_out(args)
    table = compare_variants(cfg, variants)
    path = out / f"comparison_seed{cfg.seed}.csv"
    path.write_text(table.to_csv_text())
    _say(args, f"wrote {path} ({len(table.rows)} variants)")
    return 0 if all(r["status"] == "ok" for r in table.rows) else 1


def _apply_point(cfg: EpisodeConfig, point: dict[str, float]) -> EpisodeConfig:
    gu = cfg.gu
    for axis, value in point.items():
        if axis == "overlap":
            cfg = replace(cfg, overlap=value)
        else:
            gu = replace(gu, **{axis: value})
    return replace(cfg, gu=gu)


def _sweep_point(job):
    cfg, variants, point, path = job
    table = compare_variants(_apply_point(cfg, point), variants)
    header = "# " + " ".join(f"{k}={v!r}" for k, v in sorted(point.items())) + "\n"
    Path(path).write_text(header + table.to_csv_text())
    return all(r["status"] == "ok" for r in table.rows)


def _cmd_sweep(args) -> int:
    cfg, extras = episode_config_from_file(args.config, args.seed)
    variants = _parse_variants(extras)
    axes = []
    for axis in SWEEP_AXES:
        raw = extras.get(f"sweep.{axis}")
        if raw is not None:
            values = [float(x) for x in raw.split(",") if x.strip()]
            if not values:
                raise ConfigError(f"sweep.{axis} lists no values")
            axes.append((axis, values))
    if not axes:
        raise ConfigError("sweep requires at least one sweep.<axis> key")
    out = _resolve_out(args)
    points = [dict(zip([a for a, _ in axes], combo))
              for combo in itertools.product(*[vals for _, vals in axes])]
    jobs = [(cfg, variants, point, out / f"comparison_point{i:04d}.csv")
            for i, point in enumerate(points)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_point, jobs))
    else:
        results = [_sweep_point(job) for job in jobs]
    _say(args, f"wrote {len(jobs)} comparison files to {out}")
    return 0 if all(results) else 1


def _cmd_selftest(args) -> int:
    results = run_selftest(seed=args.seed or 0)
    all_ok = True
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        all_ok &= ok
    return 0 if all_ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gu",
        description="Geometry-disentangled unlearning simulator and verifier",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext, needs_config in (
        ("run", "run one episode and write its per-step CSV", True),
        ("audit", "run an analysis-form episode and audit its guarantees", True),
        ("compare", "run several variants on one seed and tabulate", True),
        ("sweep", "grid over trust-region/weight axes, one comparison per point", True),
        ("selftest", "run the built-in oracle and finite-difference checks", False),
    ):
        p = sub.add_parser(name, help=helptext)
        if needs_config:
            p.add_argument("--config", required=True, help="flat key=value config file")
        p.add_argument("--out", default=None,
                       help="output directory (default $GU_OUT_DIR or ./out)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers (sweep)")
        p.add_argument("--quiet", action="store_true", help="suppress progress output")
    return parser


_COMMANDS = {
    "run": _cmd_run,
    "audit": _cmd_audit,
    "compare": _cmd_compare,
    "sweep": _cmd_sweep,
    "selftest": _cmd_selftest,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
