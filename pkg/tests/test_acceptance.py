"""Acceptance criteria 1-10.

Each test prints one ``PASS criterion N`` or ``FAIL criterion N`` line, and
the lines are repeated in a summary section at the end of the pytest run.
Wall-clock limits are part of each criterion.
"""

import itertools
import math
import time
from contextlib import contextmanager

import numpy as np
import pytest

from boostvi.cli import build_experiment, run_experiment
from boostvi.config import load_config
from boostvi.density import AtomFamilyConfig, MixtureDensity, SupportBox, TruncatedGaussianAtom, gaussian_sq_norm
from boostvi.integrate import QuadratureSpec, gauss_legendre_rule, integrate_box
from boostvi.lmo import GridSpec, LmoConfig, grid_atoms, grid_lmo, measure_delta, score_gradient, stochastic_lmo
from boostvi.objective import (
    bregman_gap,
    expected_gradient,
    kl_estimate,
    l2_distance_sq,
    make_engine,
    objective_constants,
    truncation_loss,
)
from boostvi.qp import SimplexQpProblem, solve_simplex_qp
from boostvi.solvers import SolverConfig, fit_geometric_decay, run, sublinear_envelope
from boostvi.targets import CauchyTarget, GaussMixTarget, mixture_target

from conftest import ACCEPTANCE_LINES, random_mixture

BENCH_BOX = SupportBox.cube(-5.0, 5.0, 1)
BENCH_FAMILY = AtomFamilyConfig(BENCH_BOX, 0.5, 2.0, 1e-4)
GRID = GridSpec((81,), (0.5, 1.0, 2.0))
TWO_GAUSSIANS = ((0.5, -2.0, 0.6), (0.5, 2.0, 0.8))


@contextmanager
def criterion(number: int, title: str, limit_s: float):
    """Time a criterion, print its verdict line and fail the test if needed.

    The body sets ``verdict["ok"]`` and ``verdict["detail"]``.
    """
    verdict = {"ok": False, "detail": "did not finish"}
    start = time.perf_counter()
    try:
        yield verdict
    except Exception as exc:
        verdict["ok"] = False
        verdict["detail"] = f"raised {type(exc).__name__}: {exc}"
        raise
    finally:
        elapsed = time.perf_counter() - start
        in_time = elapsed < limit_s
        ok = verdict["ok"] and in_time
        timing = f"{elapsed:.1f}s (limit {limit_s:g}s)" + ("" if in_time else " TOO SLOW")
        line = f"{'PASS' if ok else 'FAIL'} criterion {number} [{title}]: {verdict['detail']}; {timing}"
        print(line)
        ACCEPTANCE_LINES.append(line)
    assert verdict["ok"], verdict["detail"]
    assert in_time, timing


def trace_mixtures(trace, box):
    """The iterate at every row of a trace."""
    out = []
    for rec in trace.records:
        atoms = [TruncatedGaussianAtom(np.array(mean), sigma, box) for mean, sigma in rec.atoms]
        out.append(MixtureDensity(atoms, np.array(rec.weights)))
    return out


def brute_force_qp(gram, linear):
    """Minimum over every support set of the equality-constrained stationary point."""
    n = linear.shape[0]
    best = math.inf
    for k in range(1, n + 1):
        for support in itertools.combinations(range(n), k):
            idx = list(support)
            kkt = np.zeros((k + 1, k + 1))
            kkt[:k, :k] = 2 * gram[np.ix_(idx, idx)]
            kkt[:k, k] = 1.0
            kkt[k, :k] = 1.0
            rhs = np.concatenate([2 * linear[idx], [1.0]])
            sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
            if np.any(sol < -1e-12):
                continue
            w = np.zeros(n)
            w[idx] = np.clip(sol, 0.0, None)
            w /= w.sum()
            best = min(best, float(w @ gram @ w - 2 * linear @ w))
    return best


class TestAcceptance:
    def test_criterion_1_gaussian_square_norm(self):
        with criterion(1, "Gaussian square norm", 1.0) as v:
            errors = []
            for sigma in (0.5, 1.0, 2.0):
                half = 20 * sigma
                quad = integrate_box(
                    lambda z: np.exp(-np.sum(z**2, axis=1) / sigma**2) / (2 * math.pi * sigma**2),
                    SupportBox.cube(-half, half, 1), QuadratureSpec(1e-14, 1e-13))
                closed = 1.0 / (sigma * 2 * math.sqrt(math.pi))
                errors.append(max(abs(quad - closed), abs(gaussian_sq_norm(sigma, 1) - closed)))
            v["ok"] = max(errors) <= 1e-8
            v["detail"] = f"max abs error {max(errors):.2e} over sigma in (0.5, 1, 2), tolerance 1e-8"

    def test_criterion_2_smoothness_certificate(self):
        with criterion(2, "smoothness upper bound with L = 1/epsilon", 30.0) as v:
            family = AtomFamilyConfig(SupportBox.cube(-1.0, 1.0, 1), 0.5, 1.0)
            box = family.box
            L = objective_constants(family).L_smooth
            target = GaussMixTarget(((0.6, -0.5, 0.4), (0.4, 0.6, 0.3)), box).posterior()
            rule = gauss_legendre_rule(box, panels=200)
            rng = np.random.default_rng(2024)
            worst = -math.inf
            for _ in range(100):
                q1 = random_mixture(rng, box, int(rng.integers(1, 5)), (0.5, 1.0))
                q2 = random_mixture(rng, box, int(rng.integers(1, 5)), (0.5, 1.0))
                f1, f2 = kl_estimate(q1, target, rule).value, kl_estimate(q2, target, rule).value
                lin = expected_gradient(q2, q1, target, rule).value - expected_gradient(q1, q1, target, rule).value
                worst = max(worst, f2 - (f1 + lin + 0.5 * L * l2_distance_sq(q1, q2, rule)))
            holds = worst <= 1e-6

            # Same two atoms on a larger box: epsilon shrinks, but the stale L is kept.
            wide = SupportBox.cube(-5.0, 5.0, 1)
            stale_L = objective_constants(AtomFamilyConfig(SupportBox.cube(-1.0, 1.0, 1), 1.0, 2.0)).L_smooth
            a = MixtureDensity.single(TruncatedGaussianAtom(np.array([-2.0]), 1.0, wide))
            b = MixtureDensity.single(TruncatedGaussianAtom(np.array([2.0]), 1.0, wide))
            flat = GaussMixTarget(((1.0, 0.0, 3.0),), wide).posterior()
            spec = QuadratureSpec(1e-12, 1e-12)
            excess = bregman_gap(b, a, flat, spec) - 0.5 * stale_L * l2_distance_sq(a, b, spec)
            violated = excess > 1e-6
            v["ok"] = holds and violated
            v["detail"] = (f"100 pairs, worst excess {worst:.2e} (slack 1e-6); enlarged box with stale "
                           f"L={stale_L:.3g} violates the bound by {excess:.3g}")

    def test_criterion_3_curvature_certificate(self):
        with criterion(3, "curvature bound", 60.0) as v:
            family = AtomFamilyConfig(SupportBox.cube(-1.0, 1.0, 1), 0.5, 1.0)
            box = family.box
            c = objective_constants(family)
            loose = 4 * c.M**2 * c.lebesgue / c.epsilon
            target = GaussMixTarget(((1.0, 0.2, 0.5),), box).posterior()
            rule = gauss_legendre_rule(box, panels=200)
            rng = np.random.default_rng(77)
            values = []
            for _ in range(500):
                q = random_mixture(rng, box, int(rng.integers(1, 5)), (0.5, 1.0))
                s = random_mixture(rng, box, 1, (0.5, 1.0)).atoms[0]
                gamma = float(rng.uniform(0.01, 1.0))
                values.append(2 * bregman_gap(q.with_atom(s, gamma), q, target, rule) / gamma**2)
            top = max(values)
            v["ok"] = top <= c.curvature_bound and top <= loose
            v["detail"] = (f"max of 500 samples {top:.4g} <= curvature bound {c.curvature_bound:.4g} "
                           f"<= 4M^2 L(A)/epsilon {loose:.4g}")

    def test_criterion_4_sublinear_rate(self):
        with criterion(4, "sublinear rate", 300.0) as v:
            target = GaussMixTarget(TWO_GAUSSIANS, BENCH_BOX).posterior()
            engine = make_engine(target, BENCH_BOX)
            ref = run(SolverConfig("fully_corrective", T=200, lmo=GRID), BENCH_FAMILY, target, engine)
            kl_star = float(ref.objectives.min())
            c_f = objective_constants(BENCH_FAMILY).curvature_bound
            eps0 = 0.0  # the grid oracle is exact over the grid family
            details, ok = [], True
            for algorithm in ("fw_fixed", "fw_linesearch"):
                trace = run(SolverConfig(algorithm, T=50, lmo=GRID, early_stop=False), BENCH_FAMILY, target, engine)
                sub = trace.objectives - kl_star
                t = np.arange(sub.shape[0])
                env = sublinear_envelope(t, c_f, eps0)
                ok &= sub.shape[0] == 51 and bool(np.all(sub <= env + 1e-6))
                needed = float(np.max(sub * (t + 2) / 2))
                details.append(f"{algorithm} final gap {sub[-1]:.3g}, constant needed {needed:.3g}")
            v["ok"] = ok
            v["detail"] = (f"KL*={kl_star:.3g} from {len(ref) - 1} fully corrective steps, C_f={c_f:.3g}; "
                           + "; ".join(details))

    def test_criterion_5_synthetic_reproduction(self):
        with criterion(5, "fully corrective fits synthetic targets", 300.0) as v:
            parts, ok = [], True
            for name, target in (("cauchy", CauchyTarget(0.0, 1.0, BENCH_BOX).posterior()),
                                 ("two-gaussian", GaussMixTarget(TWO_GAUSSIANS, BENCH_BOX).posterior())):
                engine = make_engine(target, BENCH_BOX)
                fc = run(SolverConfig("fully_corrective", T=15, lmo=GRID, early_stop=False),
                         BENCH_FAMILY, target, engine)
                ls = run(SolverConfig("fw_linesearch", T=15, curvature=15.0, lmo=GRID, early_stop=False),
                         BENCH_FAMILY, target, engine)
                hit = np.flatnonzero(fc.objectives <= 0.01)
                dominated = bool(np.all(fc.objectives <= ls.objectives + 1e-12))
                ok &= hit.size > 0 and dominated
                first = int(hit[0]) if hit.size else None
                parts.append(f"{name}: KL<=0.01 at t={first}, final {fc.objectives[-1]:.2e}, "
                             f"below line search at every t: {dominated}")
            v["ok"] = ok
            v["detail"] = "; ".join(parts)

    def test_criterion_6_geometric_decay(self):
        with criterion(6, "geometric decay", 120.0) as v:
            atoms = grid_atoms(BENCH_FAMILY, GRID)
            rng = np.random.default_rng(7)
            bumps = [TruncatedGaussianAtom(np.array([m]), s, BENCH_BOX) for m, s in ((-2.5, 1.0), (0.0, 0.5), (2.5, 1.0))]
            weights = np.concatenate([0.5 * rng.dirichlet(np.ones(len(atoms))), 0.5 * np.array([0.4, 0.2, 0.4])])
            # the target lies in the relative interior of the hull, so the optimum is 0
            target = mixture_target(MixtureDensity(atoms + bumps, weights))
            trace = run(SolverConfig("fully_corrective", T=20, lmo=GRID, early_stop=False),
                        BENCH_FAMILY, target, make_engine(target, BENCH_BOX))
            slope, r2 = fit_geometric_decay(trace.objectives)
            v["ok"] = slope < -0.05 and r2 > 0.9
            v["detail"] = f"slope of log KL {slope:.3f}/iter (need < -0.05), R^2 {r2:.3f} (need > 0.9)"

    def test_criterion_7_lmo_quality(self):
        with criterion(7, "stochastic oracle quality", 300.0) as v:
            cases = []
            for target in (GaussMixTarget(TWO_GAUSSIANS, BENCH_BOX).posterior(),
                           CauchyTarget(0.0, 1.0, BENCH_BOX).posterior()):
                engine = make_engine(target, BENCH_BOX)
                for algorithm in ("fw_fixed", "fully_corrective"):
                    trace = run(SolverConfig(algorithm, T=12, lmo=GRID, early_stop=False),
                                BENCH_FAMILY, target, engine)
                    cases += [(q, target, engine) for q in trace_mixtures(trace, BENCH_BOX)]
            deltas = []
            for q, target, engine in cases:
                if len(deltas) == 50:
                    break
                exact = grid_lmo(q, target, BENCH_FAMILY, GRID, engine=engine)
                if exact.linear_value.value >= engine.objective(q).value - 1e-9:
                    continue  # q is optimal over the grid; the ratio is undefined
                approx = stochastic_lmo(q, target, LmoConfig(seed=len(deltas)), BENCH_FAMILY)
                deltas.append(measure_delta(approx, exact, q, target, engine))
            share = float(np.mean([d >= 0.5 for d in deltas]))

            box = SupportBox.cube(-1.0, 2.0, 1)
            atom = TruncatedGaussianAtom(np.array([1.2]), 0.7, box)

            def g(z):
                return np.sin(2 * z[:, 0]) + z[:, 0] ** 2

            def expectation(mean, sigma):
                a = TruncatedGaussianAtom(np.array([mean]), sigma, box)
                return integrate_box(lambda z: g(z) * a.pdf(z), box, QuadratureSpec(1e-13, 1e-13))

            h = 1e-5
            want = np.array([(expectation(1.2 + h, 0.7) - expectation(1.2 - h, 0.7)) / (2 * h),
                             (expectation(1.2, 0.7 + h) - expectation(1.2, 0.7 - h)) / (2 * h)])
            cfg = LmoConfig(samples_per_step=64, learn_sigma=True)
            grads = np.array([score_gradient(atom, g, cfg, np.random.default_rng(seed))[0] for seed in range(200)])
            pooled = grads.std(axis=0, ddof=1) / math.sqrt(grads.shape[0])
            z_scores = np.abs(grads.mean(axis=0) - want) / pooled
            unbiased = bool(np.all(z_scores <= 4))
            v["ok"] = len(deltas) == 50 and share >= 0.9 and unbiased
            v["detail"] = (f"delta >= 0.5 in {share:.0%} of {len(deltas)} calls (min {min(deltas):.2f}); "
                           f"score gradient within {z_scores.max():.2f} pooled stderr of quadrature (need <= 4)")

    def test_criterion_8_simplex_qp(self):
        with criterion(8, "simplex QP against brute force", 30.0) as v:
            rng = np.random.default_rng(8)
            worst = 0.0
            for _ in range(100):
                n = int(rng.integers(1, 7))
                A = rng.normal(size=(n, max(1, n - int(rng.integers(0, 3)))))
                gram = A @ A.T
                linear = rng.normal(size=n) * 2
                res = solve_simplex_qp(SimplexQpProblem(gram, linear))
                oracle = brute_force_qp(gram, linear)
                worst = max(worst, abs(res.objective - oracle))
            v["ok"] = worst <= 1e-8
            v["detail"] = f"100 problems with n <= 6, max objective difference {worst:.2e} (tolerance 1e-8)"

    @pytest.mark.slow
    def test_criterion_9_logistic_regression(self, repo_root):
        with criterion(9, "logistic regression at desk scale", 600.0) as v:
            base = load_config(repo_root / "configs" / "logreg.cfg")
            results = {}
            for algorithm in ("norm_corrective", "fw_linesearch", "fw_fixed"):
                exp = build_experiment(base.with_overrides({"solver.algorithm": algorithm}))
                results[algorithm] = run_experiment(exp)
            nc = results["norm_corrective"]
            recs = nc.trace.records
            init = recs[0]
            best = min(recs[1:], key=lambda r: r.objective)
            margin = init.objective - best.objective
            noise = math.hypot(init.objective_stderr, best.objective_stderr)
            improves = len(recs) <= 11 and margin >= 2 * noise and nc.error is None
            auc_ok = nc.metrics["auc_final"] >= nc.metrics["auc_init"] - 0.01

            def final(name):
                rec = results[name].trace.records[-1]
                return rec.objective, rec.objective_stderr

            (f_nc, e_nc), (f_ls, e_ls), (f_fx, e_fx) = map(final, ("norm_corrective", "fw_linesearch", "fw_fixed"))
            ordered = f_nc <= f_ls + math.hypot(e_nc, e_ls) and f_ls <= f_fx + math.hypot(e_ls, e_fx)
            v["ok"] = improves and auc_ok and ordered
            v["detail"] = (f"neg-ELBO init {init.objective:.3f} -> best {best.objective:.3f} "
                           f"({margin / noise:.1f} stderr); AUC {nc.metrics['auc_init']:.4f} -> "
                           f"{nc.metrics['auc_final']:.4f}; final neg-ELBO corrective {f_nc:.3f}, "
                           f"line search {f_ls:.3f}, fixed {f_fx:.3f}")

    def test_criterion_10_truncation_loss(self):
        with criterion(10, "Cauchy truncation loss", 1.0) as v:
            cauchy = CauchyTarget(0.0, 1.0, BENCH_BOX)
            got = truncation_loss(cauchy.untruncated(), BENCH_BOX)
            want = -math.log(2 / math.pi * math.atan(5.0))
            v["ok"] = abs(got - want) <= 1e-8
            v["detail"] = f"quadrature {got:.12f}, closed form {want:.12f}, error {abs(got - want):.1e}"
