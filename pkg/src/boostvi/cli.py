"""Command-line experiment runner.

``boostvi run CFG``
    Run one experiment and write ``trace.csv``, ``summary.json`` and the
    resolved ``config.cfg`` into the output directory.
``boostvi compare CFG CFG [...]``
    Run configurations that differ only in their ``solver.`` keys and write
    one merged per-iteration table.
``boostvi verify CFG [--json]``
    Report the family constants and run quadrature spot checks.

Exit codes: 0 success, 1 runtime failure, 2 invalid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import SYNTHETIC, ConfigError, ExperimentConfig, dump_config, load_config, non_solver_differences
from .density import (
    LOG_2PI,
    AtomFamilyConfig,
    MixtureDensity,
    SupportBox,
    TruncatedGaussianAtom,
    family_bounds,
    gaussian_sq_norm,
    inner_product,
)
from .integrate import McSpec, QuadratureSpec, integrate_box
from .objective import (
    TargetPosterior,
    kl_estimate,
    log_rate_constant,
    rate_constant,
    make_engine,
    objective_constants,
    rate_chain_constant,
    truncation_loss,
)
from .solvers import TRACE_COLUMNS, ConvergenceTrace, SolverError, default_init, run
from .targets import (
    CauchyTarget,
    CsvFormat,
    Dataset,
    DatasetError,
    GaussMixTarget,
    as_model,
    load_dataset,
    meanfield_init,
    predictive_auc,
    synthetic_chemreact,
)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


# ---------------------------------------------------------------------------
# building experiments


@dataclass
class Experiment:
    config: ExperimentConfig
    family: AtomFamilyConfig
    target: TargetPosterior
    analytic: CauchyTarget | GaussMixTarget | None = None
    dataset: Dataset | None = None


def build_experiment(cfg: ExperimentConfig) -> Experiment:
    family = cfg.family()
    kind = cfg["target.kind"]
    if kind == "cauchy":
        analytic = CauchyTarget(cfg["target.location"], cfg["target.scale"], family.box)
        return Experiment(cfg, family, analytic.posterior(), analytic)
    if kind == "gaussmix":
        analytic = GaussMixTarget(cfg["target.components"], family.box)
        return Experiment(cfg, family, analytic.posterior(), analytic)
    if cfg["target.dataset"] == SYNTHETIC:
        data = synthetic_chemreact(cfg["target.n_train"], cfg["target.n_test"], cfg["target.features"],
                                   seed=cfg["target.data_seed"], feature_scale=cfg["target.feature_scale"],
                                   noise=cfg["target.noise"])
    else:
        try:
            data = load_dataset(cfg["target.dataset"], CsvFormat(train_fraction=cfg["target.train_fraction"]))
        except DatasetError as exc:
            raise ConfigError("target.dataset", str(exc)) from None
        if data.X.shape[1] != cfg.d:
            raise ConfigError("family.dim", f"dataset has {data.X.shape[1]} features, family.dim is {cfg.d}")
    model = as_model(data, cfg["target.prior_sigma"])
    return Experiment(cfg, family, model.posterior(), None, data)


@dataclass
class RunResult:
    trace: ConvergenceTrace
    init: MixtureDensity
    metrics: dict
    elapsed_s: float
    error: str | None = None


def run_experiment(exp: Experiment) -> RunResult:
    """Initialize, run the solver and evaluate the requested metrics.

    A solver failure is captured in ``error``; the partial trace is kept.
    """
    cfg = exp.config
    start = time.perf_counter()
    if cfg["solver.init"] == "meanfield":
        init = meanfield_init(exp.target, exp.family, cfg["solver.init.steps"], cfg.seed, cfg.init_lmo())
    else:
        init = None
    panels = cfg["engine.panels"] or None
    engine = make_engine(exp.target, exp.family.box, panels=panels, n_samples=cfg["engine.n_samples"],
                         seed=cfg.seed)
    error = None
    try:
        trace = run(cfg.solver(init), exp.family, exp.target, engine)
    except SolverError as exc:
        trace, error = exc.trace, str(exc)
    if init is None:
        init = default_init(exp.family)
    metrics = {}
    final = trace.final
    if final is not None:
        if cfg["metrics.kl_quadrature"]:
            metrics["kl_quadrature"] = kl_estimate(final, exp.target, QuadratureSpec()).value
        if cfg["metrics.kl_mc"]:
            est = kl_estimate(final, exp.target, McSpec(cfg["metrics.kl_mc_samples"], cfg.seed))
            metrics[f"{exp.target.metric_name}_mc"] = est.value
            metrics[f"{exp.target.metric_name}_mc_stderr"] = est.stderr
        if cfg["metrics.auc"] and exp.dataset is not None:
            metrics["auc_init"] = predictive_auc(init, exp.dataset, cfg["metrics.auc_samples"], cfg.seed)
            metrics["auc_final"] = predictive_auc(final, exp.dataset, cfg["metrics.auc_samples"], cfg.seed)
    return RunResult(trace, init, metrics, time.perf_counter() - start, error)


# ---------------------------------------------------------------------------
# artifacts


@dataclass(frozen=True)
class RunArtifacts:
    trace_path: Path
    summary_path: Path
    config_path: Path


def atomic_write(path: Path, text: str) -> None:
    """Write through a temporary file in the same directory, then rename."""
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trace_csv(trace: ConvergenceTrace, timing: bool = False) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    writer.writerows(trace.rows(timing))
    return buf.getvalue()


def mixture_json(q: MixtureDensity | None):
    if q is None:
        return None
    return [{"weight": float(w), "mean": a.mean.tolist(), "sigma": a.sigma} for a, w in zip(q.atoms, q.weights)]


def _finite_or_none(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def _clean(obj):
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        obj = obj.item()
    return _finite_or_none(obj)


def summary_dict(exp: Experiment, result: RunResult) -> dict:
    trace = result.trace
    last = trace.records[-1] if trace.records else None
    return _clean({
        "target": exp.target.name,
        "algorithm": trace.algorithm,
        "metric": trace.metric,
        "iterations": len(trace) - 1,
        "converged": trace.converged,
        "error": result.error,
        "initial_objective": trace.records[0].objective if trace.records else None,
        "final_objective": last.objective if last else None,
        "final_objective_stderr": last.objective_stderr if last else None,
        "curvature": trace.curvature,
        "events": [{"t": t, "event": e} for t, e in trace.events],
        "metrics": result.metrics,
        "initial_mixture": mixture_json(result.init),
        "final_mixture": mixture_json(trace.final),
        "timing": {"elapsed_s": result.elapsed_s, "wallclock_ms": [r.wallclock_ms for r in trace.records]},
    })


def write_artifacts(exp: Experiment, result: RunResult, out_dir: Path, timing: bool = False) -> RunArtifacts:
    arts = RunArtifacts(out_dir / "trace.csv", out_dir / "summary.json", out_dir / "config.cfg")
    atomic_write(arts.trace_path, trace_csv(result.trace, timing))
    atomic_write(arts.summary_path, json.dumps(summary_dict(exp, result), indent=2, allow_nan=False) + "\n")
    atomic_write(arts.config_path, dump_config(exp.config))
    return arts


# ---------------------------------------------------------------------------
# commands


def _load(path, args) -> ExperimentConfig:
    cfg = load_config(path)
    overrides = {}
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        overrides["output.dir"] = str(args.out)
    return cfg.with_overrides(overrides) if overrides else cfg


def cmd_run(args) -> int:
    cfg = _load(args.config, args)
    exp = build_experiment(cfg)
    result = run_experiment(exp)
    arts = write_artifacts(exp, result, cfg.output_dir, args.timing)
    trace = result.trace
    print(f"{trace.algorithm}: {len(trace) - 1} iterations, final {trace.metric} "
          f"{trace.records[-1].objective:.6g}")
    for key, value in result.metrics.items():
        print(f"  {key} = {value:.6g}")
    print(f"trace:   {arts.trace_path}\nsummary: {arts.summary_path}\nconfig:  {arts.config_path}")
    if result.error:
        print(f"error: {result.error}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _labels(configs: Sequence[ExperimentConfig]) -> list[str]:
    labels, seen = [], {}
    for cfg in configs:
        base = cfg["solver.algorithm"]
        seen[base] = seen.get(base, 0) + 1
        labels.append(base if seen[base] == 1 else f"{base}_{seen[base]}")
    return labels


def merged_csv(labels: Sequence[str], traces: Sequence[ConvergenceTrace]) -> str:
    """One row per iteration; an objective and a gap column per run."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["t"]
    for label in labels:
        header += [f"{label}_objective", f"{label}_gap"]
    writer.writerow(header)
    n = max(len(tr) for tr in traces)
    for t in range(n):
        row = [str(t)]
        for tr in traces:
            if t < len(tr):
                rec = tr.records[t]
                row += [repr(float(rec.objective)), "" if rec.gap is None else repr(float(rec.gap))]
            else:
                row += ["", ""]
        writer.writerow(row)
    return buf.getvalue()


def cmd_compare(args) -> int:
    if len(args.configs) < 2:
        raise ConfigError("configs", "compare needs at least two configuration files")
    configs = [_load(p, argparse.Namespace(seed=args.seed, out=None)) for p in args.configs]
    for path, cfg in zip(args.configs[1:], configs[1:]):
        diff = non_solver_differences(configs[0], cfg)
        if diff:
            raise ConfigError(diff[0], f"{path} differs from {args.configs[0]} outside the solver section "
                                       f"({', '.join(diff)})")
    out_dir = Path(args.out) if args.out is not None else configs[0].output_dir / "compare"
    labels = _labels(configs)
    traces, finals, failed = [], {}, False
    for label, cfg in zip(labels, configs):
        cfg = cfg.with_overrides({"output.dir": str(out_dir / label)})
        exp = build_experiment(cfg)
        result = run_experiment(exp)
        write_artifacts(exp, result, cfg.output_dir, args.timing)
        traces.append(result.trace)
        finals[label] = summary_dict(exp, result)
        failed |= result.error is not None
    atomic_write(out_dir / "compare.csv", merged_csv(labels, traces))
    table = {label: {"iterations": s["iterations"], "final_objective": s["final_objective"],
                     "metrics": s["metrics"], "error": s["error"]} for label, s in finals.items()}
    atomic_write(out_dir / "compare.json", json.dumps(table, indent=2, allow_nan=False) + "\n")
    width = max(len(label) for label in labels)
    print(f"{'run':<{width}}  iters  final {traces[0].metric}")
    for label, tr in zip(labels, traces):
        print(f"{label:<{width}}  {len(tr) - 1:5d}  {tr.records[-1].objective:.6g}")
    print(f"merged trace: {out_dir / 'compare.csv'}")
    return EXIT_RUNTIME if failed else EXIT_OK


# ---------------------------------------------------------------------------
# verify


@dataclass
class Check:
    name: str
    status: str  # "pass", "fail" or "skipped"
    detail: str = ""


@dataclass
class VerifyReport:
    constants: dict
    chain_ok: bool
    checks: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.chain_ok and all(c.status != "fail" for c in self.checks)

    def as_dict(self) -> dict:
        return _clean({"constants": self.constants, "chain_ordering": self.chain_ok,
                       "checks": [vars(c) for c in self.checks], "ok": self.ok})


def _rel_check(name: str, got: float, want: float, tol: float) -> Check:
    err = abs(got - want) / max(1.0, abs(want))
    return Check(name, "pass" if err <= tol else "fail", f"got {got:.12g}, expected {want:.12g}")


def family_constants(family: AtomFamilyConfig) -> tuple[dict, bool]:
    """Constants with their logs, and whether the curvature chain is ordered."""
    c = objective_constants(family)
    log_l = -c.log_epsilon
    log_leb = math.log(c.diameter_sq_lebesgue) if c.diameter_sq_lebesgue > 0 else -math.inf
    log_l_diam = log_l + math.log(c.diameter_sq) if math.isfinite(c.diameter_sq) else math.inf
    log_loose = math.log(4.0) + 2 * c.log_M + family.box.log_lebesgue_measure - c.log_epsilon
    tol = 1e-12 * max(1.0, abs(log_loose))
    chain_ok = c.log_curvature_bound <= log_l_diam + tol and log_l_diam <= log_loose + tol
    consts = {
        "epsilon": c.epsilon, "log_epsilon": c.log_epsilon,
        "M": c.M, "log_M": c.log_M,
        "L_smooth": c.L_smooth, "log_L_smooth": log_l,
        "lebesgue": c.lebesgue,
        "diameter_sq_lebesgue": c.diameter_sq_lebesgue, "log_diameter_sq_lebesgue": log_leb,
        "diameter_sq_gaussian": c.diameter_sq_gaussian,
        "curvature_bound": c.curvature_bound, "log_curvature_bound": c.log_curvature_bound,
        "log_L_times_diameter_sq": log_l_diam, "log_4M2_lebesgue_over_epsilon": log_loose,
        "rate_constant_displayed": rate_constant(family),
        "log_rate_constant_displayed": log_rate_constant(family),
        "rate_constant_chain": rate_chain_constant(family),
    }
    return consts, chain_ok


def verify(exp: Experiment) -> VerifyReport:
    family = exp.family
    consts, chain_ok = family_constants(family)
    report = VerifyReport(consts, chain_ok)
    if exp.analytic is not None:
        loss = truncation_loss(exp.analytic.untruncated(), family.box) if family.d <= 2 else None
        consts["truncation_loss_closed_form"] = -math.log(exp.analytic.mass_in_box())
        consts["truncation_loss"] = loss
    checks = report.checks
    names = ("gaussian_sq_norm", "atom_normalization", "family_bounds_at_vertices", "inner_product",
             "target_normalization", "truncation_loss")
    if family.d > 2:
        checks.extend(Check(n, "skipped", f"quadrature needs d <= 2 (d={family.d})") for n in names)
        return report
    spec = QuadratureSpec(abs_tol=1e-13, rel_tol=1e-12)
    box, d = family.box, family.d
    s_min, s_max = family.sigma_min, family.sigma_max

    wide = SupportBox.cube(-12 * s_min, 12 * s_min, d)
    log_norm = -d * (math.log(s_min) + 0.5 * LOG_2PI)
    sq = integrate_box(lambda z: np.exp(2 * (log_norm - 0.5 * np.sum(z**2, axis=1) / s_min**2)), wide, spec)
    checks.append(_rel_check("gaussian_sq_norm", sq, gaussian_sq_norm(s_min, d), 1e-8))

    corner = TruncatedGaussianAtom(box.lower, s_min, box)
    centre = TruncatedGaussianAtom(box.center, s_max, box)
    masses = [integrate_box(a.pdf, box, spec) for a in (corner, centre)]
    worst = max(masses, key=lambda v: abs(v - 1.0))
    checks.append(_rel_check("atom_normalization", worst, 1.0, 1e-8))

    eps, m = family_bounds(family)
    got_eps, got_m = float(corner.pdf(box.upper)), float(corner.pdf(box.lower))
    ok = abs(got_eps - eps) <= 1e-9 * eps and abs(got_m - m) <= 1e-9 * m
    checks.append(Check("family_bounds_at_vertices", "pass" if ok else "fail",
                        f"epsilon {got_eps:.6g} vs {eps:.6g}, M {got_m:.6g} vs {m:.6g}"))

    ip = integrate_box(lambda z: corner.pdf(z) * centre.pdf(z), box, spec)
    checks.append(_rel_check("inner_product", ip, inner_product(corner, centre), 1e-8))

    if exp.analytic is None:
        checks.append(Check("target_normalization", "skipped", "target has no known normalizer"))
        checks.append(Check("truncation_loss", "skipped", "target has no known normalizer"))
        return report
    total = integrate_box(lambda z: np.exp(exp.target(z)), box, spec)
    checks.append(_rel_check("target_normalization", total, 1.0, 1e-8))
    checks.append(_rel_check("truncation_loss", consts["truncation_loss"], consts["truncation_loss_closed_form"], 1e-8))
    return report


def format_report(report: VerifyReport) -> str:
    lines = ["constants:"]
    for key, value in report.constants.items():
        lines.append(f"  {key:32s} {value!r}" if value is None else f"  {key:32s} {value:.10g}")
    verdict = "holds" if report.chain_ok else "VIOLATED"
    lines.append(f"curvature chain  Cf <= L diam^2 <= 4 M^2 L(A) / epsilon: {verdict}")
    lines.append("spot checks:")
    for c in report.checks:
        lines.append(f"  [{c.status:7s}] {c.name}: {c.detail}")
    return "\n".join(lines)


def cmd_verify(args) -> int:
    cfg = _load(args.config, args)
    report = verify(build_experiment(cfg))
    if args.json:
        print(json.dumps(report.as_dict(), indent=2, allow_nan=False))
    else:
        print(format_report(report))
    return EXIT_OK if report.ok else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# entry point


def _check_threads() -> None:
    env = os.environ.get("BOOSTVI_THREADS")
    if env is None:
        return
    try:
        ok = int(env) >= 1
    except ValueError:
        ok = False
    if not ok:
        raise ConfigError("BOOSTVI_THREADS", f"must be a positive integer, got {env!r}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override the config seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="override the output directory")
    parser = argparse.ArgumentParser(prog="boostvi", description="Boosting variational inference experiments.")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default=None, help="override the output directory")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", parents=[common], help="run one experiment")
    p_run.add_argument("config")
    p_run.add_argument("--timing", action="store_true", help="fill the wallclock_ms column of the trace")
    p_run.set_defaults(func=cmd_run)
    p_cmp = sub.add_parser("compare", parents=[common], help="compare solver settings on one problem")
    p_cmp.add_argument("configs", nargs="+")
    p_cmp.add_argument("--timing", action="store_true", help="fill the wallclock_ms columns")
    p_cmp.set_defaults(func=cmd_compare)
    p_ver = sub.add_parser("verify", parents=[common], help="report constants and run spot checks")
    p_ver.add_argument("config")
    p_ver.add_argument("--json", action="store_true", help="print the report as JSON")
    p_ver.set_defaults(func=cmd_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        _check_threads()
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SolverError, RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
