"""Linear minimization oracles over the truncated-Gaussian atom family.

The linear subproblem is ``min_s E_{z~s}[g(z)]`` with ``g = log q - log p``.
:func:`stochastic_lmo` runs projected gradient descent on the atom
parameters with a score-function gradient; :func:`grid_lmo` exhausts a finite
grid of atoms by quadrature and serves as the exact reference in low
dimension.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .density import AtomFamilyConfig, MixtureDensity, TruncatedGaussianAtom, quantize_mean
from .integrate import McEstimate
from .objective import QuadratureEngine, TargetPosterior, make_engine

VARIANCE_REDUCTION = ("none", "loo")
PROBES = ("uniform", "mixture")


class OracleFailure(RuntimeError):
    pass


@dataclass(frozen=True)
class LmoConfig:
    """Settings of the stochastic oracle.

    The step size decays geometrically, ``eta_l = step_size * step_decay**l``.
    ``probe`` picks where chains start: ``"uniform"`` uses the best of
    ``n_probe`` uniform draws (restart 0) and uniform means (the rest);
    ``"mixture"`` starts each chain at the mean of an atom of the current
    iterate (the heaviest for restart 0, then drawn by weight). The latter
    is a local search for high dimension, where uniform draws land in the
    box corners.
    """

    inner_steps: int = 60
    step_size: float = 0.05
    samples_per_step: int = 64
    n_restarts: int = 3
    learn_sigma: bool = False
    seed: int = 0
    variance_reduction: str = "loo"
    step_decay: float = 0.99
    n_probe: int = 256
    n_eval: int = 1024
    probe: str = "uniform"

    def __post_init__(self):
        if self.variance_reduction not in VARIANCE_REDUCTION:
            raise ValueError(f"variance_reduction must be one of {VARIANCE_REDUCTION}")
        if self.probe not in PROBES:
            raise ValueError(f"probe must be one of {PROBES}")
        if self.inner_steps < 0 or self.n_restarts < 1 or self.samples_per_step < 1:
            raise ValueError("inner_steps >= 0, n_restarts >= 1 and samples_per_step >= 1 required")
        if self.variance_reduction == "loo" and self.samples_per_step < 2:
            raise ValueError("the leave-one-out baseline needs samples_per_step >= 2")
        if not self.step_size > 0:
            raise ValueError("step_size must be > 0")


@dataclass(frozen=True)
class GridSpec:
    """Exhaustive oracle grid: evenly spaced means per dimension times sigmas."""

    mean_counts: tuple
    sigmas: tuple

    def __post_init__(self):
        if not self.mean_counts or min(self.mean_counts) < 1 or not self.sigmas:
            raise ValueError("grid must contain at least one atom")


@dataclass(frozen=True)
class LmoResult:
    atom: TruncatedGaussianAtom
    linear_value: McEstimate
    delta_measured: float | None = None


# ---------------------------------------------------------------------------
# parameters, scores and projection


def score(atom: TruncatedGaussianAtom, z: np.ndarray, learn_sigma: bool = False) -> np.ndarray:
    """Rows of ``grad_theta log s(z; theta)`` for theta = (mean[, sigma]).

    Includes the derivative of ``-log trunc_mass``; without it the score of a
    truncated density does not have zero mean.
    """
    from .density import _interval_mass

    mu, s, box = atom.mean, atom.sigma, atom.box
    alpha = (box.lower - mu) / s
    beta = (box.upper - mu) / s
    mass = _interval_mass(alpha, beta)
    phi_a = np.exp(-0.5 * alpha**2) / math.sqrt(2 * math.pi)
    phi_b = np.exp(-0.5 * beta**2) / math.sqrt(2 * math.pi)
    diff = z - mu
    g_mean = diff / s**2 - (phi_a - phi_b) / (s * mass)
    if not learn_sigma:
        return g_mean
    # alpha * phi(alpha) -> 0 as alpha -> -inf; guard inf * 0
    a_phi = np.where(np.isfinite(alpha), alpha * phi_a, 0.0)
    b_phi = np.where(np.isfinite(beta), beta * phi_b, 0.0)
    dlogz_ds = np.sum((a_phi - b_phi) / (s * mass))
    g_sigma = -atom.d / s + np.sum(diff**2, axis=1) / s**3 - dlogz_ds
    return np.column_stack([g_mean, g_sigma])


def score_gradient(atom: TruncatedGaussianAtom, g: Callable[[np.ndarray], np.ndarray], cfg: LmoConfig,
                   rng: np.random.Generator):
    """Score-function estimate of ``grad_theta E_{z~s(theta)}[g(z)]``.

    Returns ``(gradient, stderr)``. With the leave-one-out baseline each
    sample's weight ``g(z_i)`` is replaced by ``g(z_i)`` minus the mean of
    the other samples, which leaves the estimator unbiased.
    """
    n = cfg.samples_per_step
    z = atom.sample(n, rng)
    gz = np.asarray(g(z), dtype=float).reshape(-1)
    bad = ~np.isfinite(gz)
    if bad.any():
        raise FloatingPointError(f"non-finite gradient value at sample {z[bad][0].tolist()}")
    if cfg.variance_reduction == "loo":
        gz = gz - (gz.sum() - gz) / (n - 1)
    terms = gz[:, None] * score(atom, z, cfg.learn_sigma)
    grad = terms.mean(axis=0)
    stderr = terms.std(axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.zeros_like(grad)
    return grad, stderr


def project_params(mean, sigma: float, family: AtomFamilyConfig):
    """Clamp the mean into the box and onto the mean grid; clamp sigma."""
    box = family.box
    mean = np.clip(np.asarray(mean, dtype=float).reshape(-1), box.lower, box.upper)
    mean = quantize_mean(mean, family)
    sigma = float(min(max(sigma, family.sigma_min), family.sigma_max))
    return mean, sigma


# ---------------------------------------------------------------------------
# stochastic oracle


def _gradient_function(q, target: TargetPosterior):
    def g(z):
        return np.atleast_1d(q.log_pdf(z)) - target(z)
    return g


def _run_chain(restart: int, g, cfg: LmoConfig, family: AtomFamilyConfig, start=None, q=None):
    rng = np.random.default_rng([cfg.seed, restart])
    box = family.box
    if start is not None:
        mean, sigma = start.mean, start.sigma
    else:
        if cfg.probe == "mixture" and isinstance(q, MixtureDensity):
            # local search: start at an atom of q (the heaviest for restart 0)
            k = int(np.argmax(q.weights)) if restart == 0 else int(rng.choice(len(q.atoms), p=q.weights))
            mean = q.atoms[k].mean
        elif restart == 0:
            probe = box.uniform(cfg.n_probe, rng)
            mean = probe[int(np.argmin(g(probe)))]
        else:
            mean = box.uniform(1, rng)[0]
        sigma = math.sqrt(family.sigma_min * family.sigma_max) if cfg.learn_sigma else family.sigma_min
    mean, sigma = project_params(mean, sigma, family)
    d = family.d
    for step in range(cfg.inner_steps):
        atom = TruncatedGaussianAtom(mean, sigma, box)
        grad, _ = score_gradient(atom, g, cfg, rng)
        eta = cfg.step_size * cfg.step_decay**step
        new_mean = mean - eta * grad[:d]
        new_sigma = sigma - eta * grad[d] if cfg.learn_sigma else sigma
        if not (np.all(np.isfinite(new_mean)) and math.isfinite(new_sigma)):
            return None
        mean, sigma = project_params(new_mean, new_sigma, family)
    atom = TruncatedGaussianAtom(mean, sigma, box)
    eval_rng = np.random.default_rng([cfg.seed, restart, 1])
    z = atom.sample(cfg.n_eval, eval_rng)
    vals = np.asarray(g(z), dtype=float)
    if not np.all(np.isfinite(vals)):
        return None
    return LmoResult(atom, McEstimate.from_values(vals))


def _worker_count() -> int:
    env = os.environ.get("BOOSTVI_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _best(results: Sequence[LmoResult | None]) -> LmoResult:
    valid = [r for r in results if r is not None]
    if not valid:
        raise OracleFailure("every restart of the stochastic oracle diverged")
    return min(valid, key=lambda r: (r.linear_value.value, r.atom.key))


def stochastic_lmo(q, target: TargetPosterior, cfg: LmoConfig, family: AtomFamilyConfig,
                   g: Callable | None = None) -> LmoResult:
    """Approximate ``argmin_s E_s[log q - log p]`` by projected score-function descent.

    Chains start where ``cfg.probe`` says (see :class:`LmoConfig`). The
    restart with the smallest estimated linear value wins; ties go to the
    lexicographically smallest (mean, sigma).
    """
    if g is None:
        g = _gradient_function(q, target)
    restarts = range(cfg.n_restarts)
    workers = min(_worker_count(), cfg.n_restarts)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda r: _run_chain(r, g, cfg, family, q=q), restarts))
    else:
        results = [_run_chain(r, g, cfg, family, q=q) for r in restarts]
    return _best(results)


def refine_atom(atom: TruncatedGaussianAtom, q, target: TargetPosterior, cfg: LmoConfig,
                family: AtomFamilyConfig) -> LmoResult:
    """One projected score-gradient chain started at ``atom``."""
    res = _run_chain(0, _gradient_function(q, target), cfg, family, start=atom)
    if res is None:
        raise OracleFailure("atom refinement diverged")
    return res


# ---------------------------------------------------------------------------
# exhaustive grid oracle


def grid_atoms(family: AtomFamilyConfig, grid: GridSpec) -> list[TruncatedGaussianAtom]:
    """All grid atoms in lexicographic (mean, sigma) order."""
    box = family.box
    axes = [np.linspace(box.lower[i], box.upper[i], grid.mean_counts[i]) for i in range(family.d)]
    mesh = np.meshgrid(*axes, indexing="ij")
    means = np.column_stack([m.ravel() for m in mesh])
    means = np.unique(np.array([quantize_mean(m, family) for m in means]), axis=0)
    sigmas = sorted({min(max(float(s), family.sigma_min), family.sigma_max) for s in grid.sigmas})
    return [TruncatedGaussianAtom(m, s, box) for m in means for s in sigmas]


def grid_lmo(q, target: TargetPosterior, family: AtomFamilyConfig, grid: GridSpec,
             engine: QuadratureEngine | None = None, atoms=None) -> LmoResult:
    """Exact minimizer of ``E_s[g]`` over the grid, by quadrature.

    Values within 1e-12 (relative) of the minimum count as ties, and ties go
    to the lexicographically smallest (mean, sigma).
    """
    if engine is None:
        if family.d > 2:
            raise ValueError("the grid oracle is limited to d <= 2")
        engine = make_engine(target, family.box)
    if atoms is None:
        atoms = grid_atoms(family, grid)
    if not atoms:
        raise ValueError("empty oracle grid")
    vals, _ = engine.linear(q, atoms)
    best = float(np.min(vals))
    tol = 1e-12 * max(1.0, abs(best))
    idx = int(np.flatnonzero(vals <= best + tol)[0])
    return LmoResult(atoms[idx], McEstimate.exact(vals[idx]), 1.0)


def measure_delta(candidate: LmoResult, exact: LmoResult, q, target: TargetPosterior,
                  engine=None) -> float | None:
    """Measured oracle accuracy ``<g, s~ - q> / <g, s* - q>``, clipped to [0, 1].

    Returns None when the exact gap is non-negative: q is already optimal
    over the grid and the ratio is undefined.
    """
    if engine is None:
        engine = make_engine(target, q.box)
    vals, _ = engine.linear(q, [candidate.atom, exact.atom])
    f_q = engine.objective(q).value
    exact_gap = vals[1] - f_q
    if exact_gap >= 0:
        return None
    return float(min(max((vals[0] - f_q) / exact_gap, 0.0), 1.0))


def with_seed(cfg: LmoConfig, seed: int) -> LmoConfig:
    return replace(cfg, seed=seed)
