"""KL objective, its functional gradient, and the constants that bound it.

The objective is ``f(q) = E_q[log q - log p]``. For a normalized analytic
target this is KL(q || p); for a Bayesian joint ``log p(x, z)`` it is the
negative ELBO (KL shifted by the log evidence). The functional gradient is
the pointwise log ratio ``g = log q - log p`` (up to an additive constant
that vanishes against differences of densities).
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .density import (
    AtomFamilyConfig,
    MixtureDensity,
    SupportBox,
    TruncatedGaussianAtom,
    as_points,
    log_diameter_bounds,
    log_family_bounds,
    log_inner_product,
    log_truncation_mass,
)
from .integrate import (
    FixedRule,
    McEstimate,
    McSpec,
    QuadratureSpec,
    expectation_mc,
    integrate_box,
)

ANALYTIC = "analytic"
JOINT = "joint"


class DomainError(ValueError):
    """A point outside the support box, where the log ratio is undefined."""


@dataclass(frozen=True)
class TargetPosterior:
    """Vectorized log target evaluated on ``(n, d)`` points.

    ``normalized`` is True only for analytic densities supplied with their
    normalizing constant; objective values are then true KL divergences.
    """

    kind: str
    log_target: Callable[[np.ndarray], np.ndarray]
    d: int
    normalized: bool = True
    name: str = ""

    def __post_init__(self):
        if self.kind not in (ANALYTIC, JOINT):
            raise ValueError(f"unknown target kind {self.kind!r}")
        if self.kind == JOINT and self.normalized:
            object.__setattr__(self, "normalized", False)

    def __call__(self, z) -> np.ndarray:
        return np.asarray(self.log_target(as_points(z, self.d)), dtype=float).reshape(-1)

    @property
    def metric_name(self) -> str:
        return "kl" if self.normalized else "neg_elbo"


@dataclass(frozen=True)
class ObjectiveConstants:
    epsilon: float
    M: float
    L_smooth: float
    curvature_bound: float
    lebesgue: float
    diameter_sq: float
    diameter_sq_lebesgue: float
    diameter_sq_gaussian: float
    log_epsilon: float
    log_M: float
    log_curvature_bound: float


def _exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError:
        return math.inf


def objective_constants(cfg: AtomFamilyConfig) -> ObjectiveConstants:
    """epsilon, M, L = 1/epsilon, and the curvature bound min(L diam^2, 4 M^2 L(A) / epsilon)."""
    log_eps, log_m = log_family_bounds(cfg)
    log_leb_bound, log_gauss_bound = log_diameter_bounds(cfg)
    log_diam = min(log_leb_bound, log_gauss_bound)
    log_l = -log_eps
    loose = math.log(4.0) + 2 * log_m + cfg.box.log_lebesgue_measure - log_eps
    log_cf = min(log_l + log_diam, loose)
    return ObjectiveConstants(
        epsilon=_exp(log_eps), M=_exp(log_m), L_smooth=_exp(log_l),
        curvature_bound=_exp(log_cf), lebesgue=cfg.box.lebesgue_measure,
        diameter_sq=_exp(log_diam), diameter_sq_lebesgue=_exp(log_leb_bound),
        diameter_sq_gaussian=_exp(log_gauss_bound),
        log_epsilon=log_eps, log_M=log_m, log_curvature_bound=log_cf,
    )


def log_rate_constant(cfg: AtomFamilyConfig) -> float:
    box, s, d = cfg.box, cfg.sigma_min, cfg.d
    log_k = log_truncation_mass(box.lower, cfg.sigma_max, box)
    return (math.log(4.0) + log_truncation_mass(box.lower, s, box)
            - 0.5 * d * math.log(s) - 0.5 * d * math.log(2.0) - 2 * log_k
            + 0.5 * box.diameter_sq / s**2)


def rate_constant(cfg: AtomFamilyConfig) -> float:
    """Rate constant of the truncated-Gaussian sublinear bound, as displayed:

    4 P(N(a, s^2 I) in A) / (s^(d/2) 2^(d/2) K^2) * exp(diam(A)^2 / (2 s^2)),
    with s = sigma_min, a the lower vertex and K the smallest truncation
    mass at sigma_max. Reported only; the solvers never use it.
    """
    return _exp(log_rate_constant(cfg))


def rate_chain_constant(cfg: AtomFamilyConfig) -> float:
    """The same constant recomputed through its derivation chain,
    (1/epsilon) * 4 / (s^d (2 sqrt(pi))^d K^2). Differs from
    :func:`rate_constant` by a factor s^(d/2)."""
    log_eps, _ = log_family_bounds(cfg)
    _, log_gauss = log_diameter_bounds(cfg)
    return _exp(log_gauss - log_eps)


# ---------------------------------------------------------------------------
# pointwise quantities


def grad_log_ratio(q, target: TargetPosterior, z):
    """Functional gradient ``log q(z) - log p(z)`` at points inside the box."""
    pts = as_points(z, target.d)
    if not np.all(q.box.contains(pts)):
        raise DomainError("gradient of the KL objective is undefined outside the support box")
    out = np.atleast_1d(q.log_pdf(pts)) - target(pts)
    if np.ndim(z) <= 1 and out.shape[0] == 1:
        return float(out[0])
    return out


def _kl_integrand(q, target):
    def h(z):
        lq = np.atleast_1d(q.log_pdf(z))
        out = np.zeros_like(lq)
        inside = np.isfinite(lq)
        out[inside] = np.exp(lq[inside]) * (lq[inside] - target(z[inside]))
        return out
    return h


def kl_estimate(q, target: TargetPosterior, spec=None) -> McEstimate:
    """``E_q[log q - log p]`` by adaptive quadrature, a fixed rule, or Monte Carlo."""
    if spec is None:
        spec = QuadratureSpec() if q.d <= 2 else McSpec()
    if isinstance(spec, QuadratureSpec):
        return McEstimate.exact(integrate_box(_kl_integrand(q, target), q.box, spec))
    if isinstance(spec, FixedRule):
        return McEstimate.exact(spec.integrate(_kl_integrand(q, target)(spec.nodes)))
    if isinstance(spec, McSpec):
        return expectation_mc(lambda z: np.atleast_1d(q.log_pdf(z)) - target(z), q, spec)
    raise TypeError(f"unsupported integration spec {spec!r}")


def expected_gradient(density, q, target: TargetPosterior, spec) -> McEstimate:
    """``E_density[log q - log p]``: the inner product of the gradient at q with a density."""
    if isinstance(spec, QuadratureSpec):
        def h(z):
            lq = np.atleast_1d(density.log_pdf(z))
            out = np.zeros_like(lq)
            inside = np.isfinite(lq)
            zi = z[inside]
            out[inside] = np.exp(lq[inside]) * (np.atleast_1d(q.log_pdf(zi)) - target(zi))
            return out
        return McEstimate.exact(integrate_box(h, density.box, spec))
    if isinstance(spec, FixedRule):
        z = spec.nodes
        vals = np.exp(np.atleast_1d(density.log_pdf(z))) * (np.atleast_1d(q.log_pdf(z)) - target(z))
        return McEstimate.exact(spec.integrate(vals))
    if isinstance(spec, McSpec):
        return expectation_mc(lambda z: np.atleast_1d(q.log_pdf(z)) - target(z), density, spec)
    raise TypeError(f"unsupported integration spec {spec!r}")


def duality_gap(q: MixtureDensity, s, target: TargetPosterior, spec=None) -> McEstimate:
    """``<grad f(q), q - s> = E_q[g] - E_s[g]`` with its standard error."""
    if spec is None:
        spec = QuadratureSpec() if q.d <= 2 else McSpec()
    eq = expected_gradient(q, q, target, spec)
    if isinstance(spec, McSpec):
        spec = McSpec(spec.n_samples, spec.seed + 1)
    es = expected_gradient(s, q, target, spec)
    return McEstimate(eq.value - es.value, math.hypot(eq.stderr, es.stderr), max(eq.n, es.n))


def l2_distance_sq(p, q, spec) -> float:
    """``||p - q||^2`` by quadrature (adaptive spec or fixed rule)."""
    def h(z):
        return (np.atleast_1d(p.pdf(z)) - np.atleast_1d(q.pdf(z))) ** 2
    if isinstance(spec, FixedRule):
        return spec.integrate(h(spec.nodes))
    return integrate_box(h, p.box, spec)


def bregman_gap(y, q, target: TargetPosterior, spec) -> float:
    """``D(y, q) = f(y) - f(q) - <y - q, grad f(q)>`` by quadrature."""
    fy = kl_estimate(y, target, spec).value
    fq = kl_estimate(q, target, spec).value
    lin = expected_gradient(y, q, target, spec).value - expected_gradient(q, q, target, spec).value
    return fy - fq - lin


def truncation_loss(target: TargetPosterior, box: SupportBox, spec=None) -> float:
    """Information lost by restricting a normalized density to ``box``:
    ``-log P_p(z in box)``."""
    if not target.normalized:
        raise ValueError("truncation loss needs a normalized analytic target")
    if spec is None:
        spec = QuadratureSpec() if box.d <= 2 else McSpec()
    if isinstance(spec, McSpec):
        # mass = E_uniform[p] * L(box)
        rng = np.random.default_rng(spec.seed)
        z = box.uniform(spec.n_samples, rng)
        mass = float(np.mean(np.exp(target(z)))) * box.lebesgue_measure
    elif isinstance(spec, FixedRule):
        mass = spec.integrate(np.exp(target(spec.nodes)))
    else:
        mass = integrate_box(lambda z: np.exp(target(z)), box, spec)
    if not mass > 0:
        raise FloatingPointError(f"estimated mass in box is {mass!r}; truncation loss undefined")
    return -math.log(mass)


# ---------------------------------------------------------------------------
# batched estimators shared by the solvers


@dataclass(frozen=True, eq=False)
class PointSet:
    """Weighted points representing integrals over the box.

    ``sum_k exp(log_nu[k]) h(z_k)`` approximates ``integral h``;
    ``log_rho[i, k] = log s_i(z_k) + log_nu[k]`` for a list of atoms.
    """

    log_rho: np.ndarray
    log_nu: np.ndarray
    log_p: np.ndarray

    def log_mix(self, weights) -> np.ndarray:
        with np.errstate(divide="ignore"):
            lw = np.log(np.asarray(weights, dtype=float))
        return logsumexp(self.log_rho + lw[:, None], axis=0)

    def objective(self, weights) -> float:
        la = self.log_mix(weights)
        a = np.exp(la)
        return float(np.sum(a * (la - self.log_nu - self.log_p)))

    def gradient(self, weights) -> np.ndarray:
        la = self.log_mix(weights)
        g = la - self.log_nu - self.log_p + 1.0
        return np.exp(self.log_rho) @ g

    def hessian(self, weights) -> np.ndarray:
        la = self.log_mix(weights)
        scaled = np.exp(self.log_rho - 0.5 * la[None, :])
        return scaled @ scaled.T


def _atom_seed(atom: TruncatedGaussianAtom) -> int:
    return zlib.crc32(atom.mean.tobytes() + np.float64(atom.sigma).tobytes())


class QuadratureEngine:
    """Deterministic estimates on a fixed quadrature rule (d <= 2)."""

    exact = True

    def __init__(self, target: TargetPosterior, rule: FixedRule):
        self.target = target
        self.rule = rule
        self.log_p = target(rule.nodes)
        if not np.all(np.isfinite(self.log_p)):
            raise ValueError("log target must be finite on the support box")
        self._log_nu = rule.log_weights
        self._rows: dict = {}

    def atom_log_pdf(self, atoms: Sequence[TruncatedGaussianAtom]) -> np.ndarray:
        out = []
        for a in atoms:
            row = self._rows.get(a.key)
            if row is None:
                row = a.log_pdf(self.rule.nodes)
                self._rows[a.key] = row
            out.append(row)
        return np.stack(out)

    def log_q(self, q: MixtureDensity) -> np.ndarray:
        with np.errstate(divide="ignore"):
            lw = np.log(q.weights)
        return logsumexp(self.atom_log_pdf(q.atoms) + lw[:, None], axis=0)

    def objective(self, q: MixtureDensity) -> McEstimate:
        lq = self.log_q(q)
        return McEstimate.exact(self.rule.integrate(np.exp(lq) * (lq - self.log_p)))

    def gradient_values(self, q: MixtureDensity) -> np.ndarray:
        return self.log_q(q) - self.log_p

    def linear(self, q: MixtureDensity, atoms: Sequence[TruncatedGaussianAtom], g=None):
        """E_s[g] for each atom (values, stderrs)."""
        if g is None:
            g = self.gradient_values(q)
        vals = np.exp(self.atom_log_pdf(atoms) + self._log_nu[None, :]) @ g
        return vals, np.zeros_like(vals)

    def gram(self, atoms: Sequence[TruncatedGaussianAtom]) -> np.ndarray:
        rows = np.exp(self.atom_log_pdf(atoms) + 0.5 * self._log_nu[None, :])
        return rows @ rows.T

    def point_set(self, atoms: Sequence[TruncatedGaussianAtom]) -> PointSet:
        return PointSet(self.atom_log_pdf(atoms) + self._log_nu[None, :], self._log_nu, self.log_p)

    def l2_sq(self, p, q) -> float:
        return l2_distance_sq(p, q, self.rule)


class MonteCarloEngine:
    """Seeded Monte Carlo estimates for any dimension.

    Each atom draws from its own stream keyed by its parameters, so repeated
    expectations under the same atom reuse the same samples (common random
    numbers). Gram entries use the per-coordinate factorization of
    :func:`~boostvi.density.log_inner_product`, which is exact.
    """

    exact = False

    def __init__(self, target: TargetPosterior, n_samples: int = 2000, seed: int = 0,
                 n_per_atom: int | None = None):
        self.target = target
        self.n_samples = n_samples
        self.seed = seed
        self.n_per_atom = n_per_atom or n_samples

    def _atom_samples(self, atom, n, stream):
        rng = np.random.default_rng([self.seed, stream, _atom_seed(atom)])
        return atom.sample(n, rng)

    def objective(self, q: MixtureDensity) -> McEstimate:
        rng = np.random.default_rng([self.seed, 0])
        z = q.sample(self.n_samples, rng)
        return McEstimate.from_values(np.atleast_1d(q.log_pdf(z)) - self.target(z))

    def linear(self, q: MixtureDensity, atoms: Sequence[TruncatedGaussianAtom], g=None):
        vals, errs = [], []
        for a in atoms:
            z = self._atom_samples(a, self.n_per_atom, 1)
            est = McEstimate.from_values(np.atleast_1d(q.log_pdf(z)) - self.target(z))
            vals.append(est.value)
            errs.append(est.stderr)
        return np.array(vals), np.array(errs)

    def gram(self, atoms: Sequence[TruncatedGaussianAtom]) -> np.ndarray:
        k = len(atoms)
        logs = np.empty((k, k))
        for i in range(k):
            for j in range(i, k):
                logs[i, j] = logs[j, i] = log_inner_product(atoms[i], atoms[j])
        return np.exp(logs)

    def point_set(self, atoms: Sequence[TruncatedGaussianAtom]) -> PointSet:
        """Balance-heuristic importance sample from the uniform mixture of atoms.

        Each atom's row is normalized to unit mass (self-normalized
        importance weights). Mixture weights then always give total mass 1,
        so the estimate ignores constant offsets in ``log p``; without this
        the variance scales with the size of the unnormalized log joint.
        """
        m = len(atoms)
        z = np.concatenate([self._atom_samples(a, self.n_per_atom, 2) for a in atoms])
        comp = np.stack([np.atleast_1d(a.log_pdf(z)) for a in atoms])
        log_r = logsumexp(comp, axis=0) - math.log(m)
        log_nu = -math.log(z.shape[0]) - log_r
        log_rho = comp + log_nu[None, :]
        log_rho -= logsumexp(log_rho, axis=1, keepdims=True)
        return PointSet(log_rho, log_nu, self.target(z))

    def l2_sq(self, p, q) -> float:
        raise NotImplementedError("L2 distances are only computed by quadrature")


def make_engine(target: TargetPosterior, box: SupportBox, panels=None, n_samples: int = 2000,
                seed: int = 0):
    """Quadrature engine for d <= 2, Monte Carlo otherwise."""
    from .integrate import gauss_legendre_rule

    if box.d <= 2:
        if panels is None:
            panels = 400 if box.d == 1 else 60
        return QuadratureEngine(target, gauss_legendre_rule(box, panels))
    return MonteCarloEngine(target, n_samples=n_samples, seed=seed)
