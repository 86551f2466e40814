"""Quadrature and Monte Carlo on support boxes.

Two quadrature paths share one convention (integrands take an ``(n, d)``
array of points and return ``n`` values):

* :func:`integrate_box` -- adaptive Gauss-Kronrod (7/15) panels, used as the
  reference oracle in one and two dimensions;
* :func:`gauss_legendre_rule` -- a fixed composite Gauss-Legendre rule whose
  nodes are reused across many integrands inside the solvers.

Monte Carlo (:func:`expectation_mc`) covers every dimension.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .density import SupportBox

# Gauss-Kronrod 7/15 nodes on [-1, 1] (non-negative half, descending).
_XGK = np.array([
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
])
_WGK = np.array([
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
])
_WG = np.array([
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
])

KRONROD_NODES = np.concatenate([-_XGK[:-1], _XGK[::-1]])
KRONROD_WEIGHTS = np.concatenate([_WGK[:-1], _WGK[::-1]])
# Gauss nodes are the odd-indexed Kronrod nodes.
GAUSS_WEIGHTS = np.zeros(15)
GAUSS_WEIGHTS[1::2] = np.concatenate([_WG[:-1], _WG[::-1]])


class UnsupportedDimensionError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    """Subdivision budget exhausted; ``estimate`` and ``error`` hold the best result."""

    def __init__(self, message: str, estimate: float, error: float):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


@dataclass(frozen=True)
class QuadratureSpec:
    abs_tol: float = 1e-11
    rel_tol: float = 1e-11
    max_subdivisions: int = 5000

    def __post_init__(self):
        if not (self.abs_tol > 0 and self.rel_tol > 0):
            raise ValueError("quadrature tolerances must be > 0")
        if self.max_subdivisions < 1:
            raise ValueError("max_subdivisions must be >= 1")


@dataclass(frozen=True)
class McSpec:
    n_samples: int = 4000
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")


@dataclass(frozen=True)
class McEstimate:
    value: float
    stderr: float
    n: int

    @classmethod
    def from_values(cls, values: np.ndarray) -> "McEstimate":
        values = np.asarray(values, dtype=float)
        n = values.shape[0]
        return cls(float(np.mean(values)), float(np.std(values, ddof=1) / math.sqrt(n)) if n > 1 else 0.0, n)

    @classmethod
    def exact(cls, value: float) -> "McEstimate":
        return cls(float(value), 0.0, 0)


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error: float
    n_panels: int
    n_evals: int
    n_nonfinite: int


def _guarded(f, pts):
    vals = np.asarray(f(pts), dtype=float).reshape(-1)
    bad = ~np.isfinite(vals)
    n_bad = int(bad.sum())
    if n_bad:
        vals = np.where(bad, 0.0, vals)
    return vals, n_bad


def _panel_1d(f, a, b):
    half = 0.5 * (b - a)
    mid = 0.5 * (a + b)
    vals, n_bad = _guarded(f, (mid + half * KRONROD_NODES).reshape(-1, 1))
    k = half * float(np.dot(KRONROD_WEIGHTS, vals))
    g = half * float(np.dot(GAUSS_WEIGHTS, vals))
    return k, abs(k - g), n_bad


def _panel_2d(f, lo, hi):
    half = 0.5 * (hi - lo)
    mid = 0.5 * (lo + hi)
    x = mid[0] + half[0] * KRONROD_NODES
    y = mid[1] + half[1] * KRONROD_NODES
    xx, yy = np.meshgrid(x, y, indexing="ij")
    vals, n_bad = _guarded(f, np.column_stack([xx.ravel(), yy.ravel()]))
    vals = vals.reshape(15, 15)
    scale = half[0] * half[1]
    k = scale * float(KRONROD_WEIGHTS @ vals @ KRONROD_WEIGHTS)
    g = scale * float(GAUSS_WEIGHTS @ vals @ GAUSS_WEIGHTS)
    return k, abs(k - g), n_bad


def integrate_box(f: Callable[[np.ndarray], np.ndarray], box: SupportBox,
                  spec: QuadratureSpec = QuadratureSpec(), full_output: bool = False):
    """Adaptive integral of ``f`` over ``box`` (d <= 2).

    The panel with the largest error estimate is bisected (quartered in 2-D)
    until the summed error meets ``max(abs_tol, rel_tol * |value|)``.
    Non-finite integrand values are replaced by zero and counted. The final
    sum is an exactly rounded ``math.fsum`` over panels, so the result does
    not depend on evaluation order.
    """
    d = box.d
    if d > 2:
        raise UnsupportedDimensionError(f"adaptive quadrature supports d <= 2, got d={d}; use Monte Carlo")
    evals_per_panel = 15 if d == 1 else 225

    def evaluate(lo, hi):
        if d == 1:
            return _panel_1d(f, float(lo[0]), float(hi[0]))
        return _panel_2d(f, lo, hi)

    counter = 0
    heap = []
    n_bad_total = 0
    lo0, hi0 = box.lower.copy(), box.upper.copy()
    val, err, n_bad = evaluate(lo0, hi0)
    n_bad_total += n_bad
    heapq.heappush(heap, (-err, counter, lo0, hi0, val))
    n_panels_evaluated = 1
    subdivisions = 0
    total, total_err = val, err
    while True:
        if total_err <= max(spec.abs_tol, spec.rel_tol * abs(total)):
            break
        if subdivisions >= spec.max_subdivisions:
            raise ConvergenceError(
                f"quadrature did not converge in {spec.max_subdivisions} subdivisions "
                f"(estimate {total!r}, error {total_err:.3g})", total, total_err)
        neg_err, _, lo, hi, old = heapq.heappop(heap)
        total -= old
        total_err += neg_err
        mid = 0.5 * (lo + hi)
        if d == 1:
            children = [(lo, mid), (mid, hi)]
        else:
            children = [
                (np.array([lo[0], lo[1]]), np.array([mid[0], mid[1]])),
                (np.array([mid[0], lo[1]]), np.array([hi[0], mid[1]])),
                (np.array([lo[0], mid[1]]), np.array([mid[0], hi[1]])),
                (np.array([mid[0], mid[1]]), np.array([hi[0], hi[1]])),
            ]
        for clo, chi in children:
            counter += 1
            v, e, n_bad = evaluate(clo, chi)
            n_bad_total += n_bad
            n_panels_evaluated += 1
            heapq.heappush(heap, (-e, counter, clo, chi, v))
            total += v
            total_err += e
        subdivisions += 1
        if subdivisions % 64 == 0:
            # refresh running sums so cancellation cannot accumulate
            total = math.fsum(item[4] for item in heap)
            total_err = math.fsum(-item[0] for item in heap)
    # reduce in panel order (left-to-right) for a reproducible sum
    panels = sorted(heap, key=lambda item: tuple(item[2]))
    value = math.fsum(item[4] for item in panels)
    if full_output:
        return QuadratureResult(value, float(total_err), len(heap), n_panels_evaluated * evals_per_panel, n_bad_total)
    return value


@dataclass(frozen=True, eq=False)
class FixedRule:
    """A fixed quadrature rule: ``integral h ~= sum(weights * h(nodes))``."""

    nodes: np.ndarray
    weights: np.ndarray

    @property
    def log_weights(self) -> np.ndarray:
        return np.log(self.weights)

    def integrate(self, values) -> float:
        return float(np.dot(self.weights, np.asarray(values, dtype=float)))

    def __len__(self):
        return self.weights.shape[0]


def gauss_legendre_rule(box: SupportBox, panels=400, order: int = 8) -> FixedRule:
    """Composite Gauss-Legendre rule with equal panels (tensor product in 2-D).

    ``panels`` is an int or a per-dimension sequence.
    """
    d = box.d
    if d > 2:
        raise UnsupportedDimensionError("fixed quadrature rules are provided for d <= 2")
    if np.isscalar(panels):
        panels = [int(panels)] * d
    x, w = np.polynomial.legendre.leggauss(order)
    axes_nodes, axes_weights = [], []
    for i in range(d):
        edges = np.linspace(box.lower[i], box.upper[i], panels[i] + 1)
        half = 0.5 * np.diff(edges)
        mid = 0.5 * (edges[:-1] + edges[1:])
        axes_nodes.append((mid[:, None] + half[:, None] * x[None, :]).ravel())
        axes_weights.append((half[:, None] * w[None, :]).ravel())
    if d == 1:
        return FixedRule(axes_nodes[0].reshape(-1, 1), axes_weights[0])
    xx, yy = np.meshgrid(axes_nodes[0], axes_nodes[1], indexing="ij")
    ww = np.outer(axes_weights[0], axes_weights[1])
    return FixedRule(np.column_stack([xx.ravel(), yy.ravel()]), ww.ravel())


class NonFiniteIntegrandError(FloatingPointError):
    def __init__(self, message: str, samples: np.ndarray):
        super().__init__(message)
        self.samples = samples


def expectation_mc(f: Callable[[np.ndarray], np.ndarray], sampler, spec: McSpec) -> McEstimate:
    """Monte Carlo mean of ``f`` under ``sampler`` (anything with ``sample(n, rng)``)."""
    rng = np.random.default_rng(spec.seed)
    z = sampler.sample(spec.n_samples, rng)
    vals = np.asarray(f(z), dtype=float).reshape(-1)
    bad = ~np.isfinite(vals)
    if bad.any():
        raise NonFiniteIntegrandError(
            f"{int(bad.sum())} non-finite integrand values, first at {z[bad][0].tolist()}", z[bad])
    return McEstimate.from_values(vals)
