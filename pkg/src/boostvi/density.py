"""Truncated isotropic Gaussian atoms on a box, and mixtures over them.

Every density here is zero outside its support box and strictly positive
inside it, so log densities are finite on the box and ``-inf`` off it.
Arrays of evaluation points have shape ``(n, d)``; a single point of shape
``(d,)`` gives a scalar result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import erfc, logsumexp, ndtri

LOG_2PI = math.log(2.0 * math.pi)
_SQRT2 = math.sqrt(2.0)


def norm_cdf(x):
    """Standard normal CDF, ``0.5 * erfc(-x / sqrt(2))``.

    erfc keeps full relative precision in the lower tail, which is where
    truncation masses of atoms near a box face are computed.
    """
    return 0.5 * erfc(-np.asarray(x, dtype=float) / _SQRT2)


def _interval_mass(a, b):
    """P(a <= X <= b) for X ~ N(0, 1), elementwise, without cancellation."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    upper_side = a > 0
    lo = np.where(upper_side, -b, a)
    hi = np.where(upper_side, -a, b)
    return norm_cdf(hi) - norm_cdf(lo)


def _truncnorm_standard(a, b, u):
    """Inverse-CDF draw of N(0,1) restricted to [a, b] for uniforms ``u``.

    Intervals lying entirely in the upper tail are reflected so that the CDF
    differences are always taken in the well-conditioned lower tail.
    """
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    p_lo = norm_cdf(lo)
    p_hi = norm_cdf(hi)
    x = ndtri(p_lo + u * (p_hi - p_lo))
    x = np.clip(x, lo, hi)
    return np.where(flip, -x, x)


@dataclass(frozen=True, eq=False)
class SupportBox:
    """Axis-aligned compact support ``[lower, upper]`` in R^d."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        upper = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if lower.ndim != 1 or lower.shape != upper.shape:
            raise ValueError("lower and upper must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))):
            raise ValueError("box bounds must be finite")
        if np.any(lower >= upper):
            raise ValueError("box must be full-dimensional: lower < upper in every coordinate")
        lower.flags.writeable = False
        upper.flags.writeable = False
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def cube(cls, lo: float, hi: float, d: int) -> "SupportBox":
        return cls(np.full(d, float(lo)), np.full(d, float(hi)))

    @property
    def d(self) -> int:
        return self.lower.shape[0]

    @property
    def widths(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def lebesgue_measure(self) -> float:
        return float(np.prod(self.widths))

    @property
    def log_lebesgue_measure(self) -> float:
        return float(np.sum(np.log(self.widths)))

    @property
    def diameter_sq(self) -> float:
        return float(np.sum(self.widths**2))

    def contains(self, z) -> np.ndarray:
        pts = as_points(z, self.d)
        return np.all((pts >= self.lower) & (pts <= self.upper), axis=1)

    def uniform(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.lower + rng.random((n, self.d)) * self.widths

    def __eq__(self, other):
        if not isinstance(other, SupportBox):
            return NotImplemented
        return np.array_equal(self.lower, other.lower) and np.array_equal(self.upper, other.upper)

    def __hash__(self):
        return hash((self.lower.tobytes(), self.upper.tobytes()))

    def __repr__(self):
        return f"SupportBox(lower={self.lower.tolist()}, upper={self.upper.tolist()})"


def as_points(z, d: int) -> np.ndarray:
    """Coerce ``z`` to an ``(n, d)`` float array, checking the dimension."""
    pts = np.asarray(z, dtype=float)
    if pts.ndim == 0:
        pts = pts.reshape(1, 1)
    elif pts.ndim == 1:
        pts = pts.reshape(1, -1) if pts.shape[0] == d else pts.reshape(-1, 1)
    if pts.ndim != 2 or pts.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got array of shape {np.shape(z)}")
    return pts


def _scalar_or_array(values: np.ndarray, z):
    if np.ndim(z) <= 1 and values.shape[0] == 1:
        return float(values[0])
    return values


@dataclass(frozen=True, eq=False)
class AtomFamilyConfig:
    """The atom family: isotropic scale range and mean grid on a box."""

    box: SupportBox
    sigma_min: float
    sigma_max: float
    mean_stride: float = 0.0

    def __post_init__(self):
        if not self.sigma_min > 0:
            raise ValueError("sigma_min must be > 0")
        if not self.sigma_max >= self.sigma_min:
            raise ValueError("sigma_max must be >= sigma_min")
        if not self.mean_stride >= 0:
            raise ValueError("mean_stride must be >= 0")

    @property
    def d(self) -> int:
        return self.box.d


def log_truncation_mass(mean, sigma: float, box: SupportBox) -> float:
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    mean = np.asarray(mean, dtype=float).reshape(-1)
    if mean.shape[0] != box.d:
        raise ValueError("mean dimension does not match box")
    masses = _interval_mass((box.lower - mean) / sigma, (box.upper - mean) / sigma)
    with np.errstate(divide="ignore"):
        return float(np.sum(np.log(masses)))


def truncation_mass(mean, sigma: float, box: SupportBox) -> float:
    """P(N(mean, sigma^2 I) in box): product of 1-D interval masses."""
    return math.exp(log_truncation_mass(mean, sigma, box))


@dataclass(frozen=True, eq=False)
class TruncatedGaussianAtom:
    """N(mean, sigma^2 I) restricted to ``box`` and renormalized."""

    mean: np.ndarray
    sigma: float
    box: SupportBox
    log_trunc_mass: float = field(init=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float)).copy()
        if mean.shape != (self.box.d,):
            raise ValueError(f"mean must have length {self.box.d}")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean must be finite")
        mean.flags.writeable = False
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "log_trunc_mass", log_truncation_mass(mean, self.sigma, self.box))

    @property
    def d(self) -> int:
        return self.box.d

    @property
    def trunc_mass(self) -> float:
        return math.exp(self.log_trunc_mass)

    @property
    def key(self) -> tuple:
        return (tuple(self.mean.tolist()), self.sigma)

    def same_as(self, other: "TruncatedGaussianAtom") -> bool:
        return self.key == other.key and self.box == other.box

    def log_pdf(self, z):
        pts = as_points(z, self.d)
        sq = np.sum((pts - self.mean) ** 2, axis=1)
        out = (-0.5 * sq / self.sigma**2 - self.d * (math.log(self.sigma) + 0.5 * LOG_2PI)
               - self.log_trunc_mass)
        out = np.where(self.box.contains(pts), out, -np.inf)
        return _scalar_or_array(out, z)

    def pdf(self, z):
        return np.exp(self.log_pdf(z))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        a = (self.box.lower - self.mean) / self.sigma
        b = (self.box.upper - self.mean) / self.sigma
        u = rng.random((n, self.d))
        x = self.mean + self.sigma * _truncnorm_standard(a, b, u)
        return np.clip(x, self.box.lower, self.box.upper)

    def cdf_1d(self, x):
        """Marginal CDF along a single coordinate (1-D atoms only)."""
        if self.d != 1:
            raise ValueError("cdf_1d is defined for 1-D atoms")
        lo, hi, mu, s = self.box.lower[0], self.box.upper[0], self.mean[0], self.sigma
        x = np.clip(np.asarray(x, dtype=float), lo, hi)
        return _interval_mass((lo - mu) / s, (x - mu) / s) / _interval_mass((lo - mu) / s, (hi - mu) / s)

    def __repr__(self):
        return f"TruncatedGaussianAtom(mean={self.mean.tolist()}, sigma={self.sigma:g})"


def atom_pdf(atom: TruncatedGaussianAtom, z):
    """Density of ``atom`` at ``z``: the renormalized Gaussian inside the box, 0 outside."""
    return atom.pdf(z)


class MixtureDensity:
    """Convex combination of truncated atoms sharing one support box.

    Weights are validated to lie on the simplex (to 1e-12) and then
    renormalized exactly; instances are treated as immutable.
    """

    SIMPLEX_TOL = 1e-12

    def __init__(self, atoms: Sequence[TruncatedGaussianAtom], weights=None):
        atoms = tuple(atoms)
        if not atoms:
            raise ValueError("a mixture needs at least one atom")
        box = atoms[0].box
        if any(a.box != box for a in atoms):
            raise ValueError("all atoms must share the same support box")
        if weights is None:
            weights = np.full(len(atoms), 1.0 / len(atoms))
        w = np.asarray(weights, dtype=float).reshape(-1)
        if w.shape[0] != len(atoms):
            raise ValueError("weights and atoms differ in length")
        if not np.all(np.isfinite(w)) or np.any(w < -self.SIMPLEX_TOL):
            raise ValueError(f"weights must be non-negative, got {w}")
        if abs(w.sum() - 1.0) > self.SIMPLEX_TOL * max(1, len(w)):
            raise ValueError(f"weights must sum to 1, got sum {w.sum()!r}")
        w = np.clip(w, 0.0, None)
        w = w / w.sum()
        w.flags.writeable = False
        self.atoms = atoms
        self.weights = w
        self.box = box

    @classmethod
    def single(cls, atom: TruncatedGaussianAtom) -> "MixtureDensity":
        return cls([atom], [1.0])

    @property
    def d(self) -> int:
        return self.box.d

    def __len__(self):
        return len(self.atoms)

    @property
    def active_atoms(self) -> int:
        return int(np.sum(self.weights > 1e-12))

    def component_log_pdfs(self, z) -> np.ndarray:
        """``(k, n)`` matrix of per-atom log densities."""
        pts = as_points(z, self.d)
        return np.stack([a.log_pdf(pts) for a in self.atoms])

    def log_pdf(self, z):
        pts = as_points(z, self.d)
        comp = self.component_log_pdfs(pts)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)[:, None]
        out = logsumexp(comp + logw, axis=0)
        out = np.where(self.box.contains(pts), out, -np.inf)
        return _scalar_or_array(out, z)

    def pdf(self, z):
        return np.exp(self.log_pdf(z))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        counts = rng.multinomial(n, self.weights)
        idx = np.repeat(np.arange(len(self.atoms)), counts)
        out = np.empty((n, self.d))
        for k in np.flatnonzero(counts):
            out[idx == k] = self.atoms[k].sample(int(counts[k]), rng)
        # draw order must not depend on component index
        return out[rng.permutation(n)]

    def with_atom(self, atom: TruncatedGaussianAtom, gamma: float) -> "MixtureDensity":
        """``(1 - gamma) * self + gamma * atom``, merging duplicate atoms."""
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        atoms = list(self.atoms)
        weights = list((1.0 - gamma) * self.weights)
        for i, a in enumerate(atoms):
            if a.same_as(atom):
                weights[i] += gamma
                break
        else:
            atoms.append(atom)
            weights.append(gamma)
        return MixtureDensity(atoms, weights).pruned()

    def pruned(self, threshold: float = 0.0) -> "MixtureDensity":
        keep = self.weights > threshold
        if keep.all():
            return self
        return MixtureDensity([a for a, k in zip(self.atoms, keep) if k], self.weights[keep] / self.weights[keep].sum())

    def __repr__(self):
        parts = ", ".join(f"{w:.4g}*{a!r}" for a, w in zip(self.atoms, self.weights))
        return f"MixtureDensity({parts})"


def mixture_log_pdf(q: MixtureDensity, z):
    return q.log_pdf(z)


def sample_mixture(q: MixtureDensity, n: int, seed) -> np.ndarray:
    """Draw ``n`` points: a categorical pick over weights, then an exact
    inverse-CDF draw from the chosen truncated atom."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return q.sample(n, np.random.default_rng(seed))


class UniformBox:
    """Uniform density on a box; a flat iterate for single-atom fits."""

    def __init__(self, box: SupportBox):
        self.box = box

    @property
    def d(self) -> int:
        return self.box.d

    def log_pdf(self, z):
        pts = as_points(z, self.d)
        out = np.where(self.box.contains(pts), -self.box.log_lebesgue_measure, -np.inf)
        return _scalar_or_array(out, z)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.box.uniform(n, rng)


def quantize_mean(mean, cfg: AtomFamilyConfig) -> np.ndarray:
    """Snap each coordinate to the nearest multiple of ``mean_stride`` above
    ``lower`` (ties go to the lower grid point), then clamp into the box."""
    mean = np.asarray(mean, dtype=float).reshape(-1)
    box = cfg.box
    if cfg.mean_stride == 0:
        return mean.copy()
    h = cfg.mean_stride
    k = np.ceil((mean - box.lower) / h - 0.5)
    k_max = np.floor(box.widths / h + 1e-9)
    k = np.clip(k, 0, k_max)
    return np.minimum(box.lower + k * h, box.upper)


def make_atom(mean, sigma: float, cfg: AtomFamilyConfig) -> TruncatedGaussianAtom:
    """Atom of the family with the given parameters after projection."""
    mean = np.clip(np.asarray(mean, dtype=float).reshape(-1), cfg.box.lower, cfg.box.upper)
    sigma = min(max(float(sigma), cfg.sigma_min), cfg.sigma_max)
    return TruncatedGaussianAtom(quantize_mean(mean, cfg), sigma, cfg.box)


def log_family_bounds(cfg: AtomFamilyConfig) -> tuple[float, float]:
    """Natural logs of (epsilon, M); finite even when the values under/overflow."""
    box, s, d = cfg.box, cfg.sigma_min, cfg.d
    log_mass_corner = log_truncation_mass(box.lower, s, box)
    log_norm = -d * (math.log(s) + 0.5 * LOG_2PI)
    log_eps = log_norm - 0.5 * box.diameter_sq / s**2 - log_mass_corner
    log_m = log_norm - log_mass_corner
    return log_eps, log_m


def family_bounds(cfg: AtomFamilyConfig) -> tuple[float, float]:
    """Uniform lower and upper bounds (epsilon, M) on atom densities over the box.

    epsilon is the sigma_min atom centred on the ``lower`` vertex evaluated at
    the ``upper`` vertex; M is the peak of the sigma_min atom centred on a
    vertex, where the truncation mass is smallest.
    """
    log_eps, log_m = log_family_bounds(cfg)
    return math.exp(log_eps), math.exp(log_m)


def min_truncation_mass(cfg: AtomFamilyConfig, sigma: float | None = None) -> float:
    """K: the smallest truncation mass over means in the box (attained at a vertex)."""
    sigma = cfg.sigma_max if sigma is None else sigma
    return truncation_mass(cfg.box.lower, sigma, cfg.box)


def log_diameter_bounds(cfg: AtomFamilyConfig) -> tuple[float, float]:
    """Logs of the two squared-diameter bounds: 4 M^2 L(A) and the Gaussian
    L2-norm bound 4 / (sigma_min^d (2 sqrt(pi))^d K^2)."""
    d = cfg.d
    _, log_m = log_family_bounds(cfg)
    lebesgue = math.log(4.0) + 2 * log_m + cfg.box.log_lebesgue_measure
    log_k = log_truncation_mass(cfg.box.lower, cfg.sigma_max, cfg.box)
    gaussian = math.log(4.0) - d * (math.log(cfg.sigma_min) + math.log(2.0 * math.sqrt(math.pi))) - 2 * log_k
    return lebesgue, gaussian


def family_diameter_sq(cfg: AtomFamilyConfig) -> float:
    """Upper bound on max ||q1 - q2||^2 over pairs of atoms in the family."""
    return math.exp(min(log_diameter_bounds(cfg)))


def gaussian_sq_norm(sigma: float, d: int = 1) -> float:
    """Squared L2 norm of an untruncated N(mu, sigma^2 I) density in R^d."""
    return 1.0 / (sigma**d * (2.0 * math.sqrt(math.pi)) ** d)


def log_inner_product(s1: TruncatedGaussianAtom, s2: TruncatedGaussianAtom) -> float:
    """log of the L2 inner product of two atoms on their common box.

    The integrand factorizes over coordinates; in each one the product of two
    Gaussians is a scaled Gaussian whose mass over the interval is a
    difference of normal CDFs.
    """
    if s1.box != s2.box:
        raise ValueError("atoms must share a support box")
    box = s1.box
    v1, v2 = s1.sigma**2, s2.sigma**2
    v = v1 + v2
    tau = math.sqrt(v1 * v2 / v)
    centre = (s1.mean * v2 + s2.mean * v1) / v
    diff = s1.mean - s2.mean
    log_scale = -0.5 * diff**2 / v - 0.5 * (LOG_2PI + math.log(v))
    mass = _interval_mass((box.lower - centre) / tau, (box.upper - centre) / tau)
    with np.errstate(divide="ignore"):
        total = float(np.sum(log_scale + np.log(mass)))
    return total - s1.log_trunc_mass - s2.log_trunc_mass


def inner_product(s1: TruncatedGaussianAtom, s2: TruncatedGaussianAtom) -> float:
    return math.exp(log_inner_product(s1, s2))
