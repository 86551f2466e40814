"""Quadratic programs over the probability simplex."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto {w >= 0, sum(w) = 1} (sort-based, exact).

    The input is shifted so its largest entry is zero; the projection is
    unchanged by a common shift, and huge entries no longer swamp the unit
    budget.
    """
    v = np.asarray(v, dtype=float).ravel()
    v = v - v.max()
    n = v.shape[0]
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    ind = np.arange(1, n + 1)
    rho = np.count_nonzero(u - css / ind > 0)
    theta = css[rho - 1] / rho
    return np.maximum(v - theta, 0.0)


@dataclass(frozen=True, eq=False)
class SimplexQpProblem:
    """minimize ``w' G w - 2 c' w (+ constant)`` over the simplex.

    For the norm-corrective step G holds L2 inner products of atoms,
    ``c_i = <s_i, b>`` and ``constant = <b, b>``, so the objective equals
    ``||sum_i w_i s_i - b||^2``.
    """

    gram: np.ndarray
    linear: np.ndarray
    constant: float = 0.0

    def __post_init__(self):
        g = np.asarray(self.gram, dtype=float)
        c = np.asarray(self.linear, dtype=float).ravel()
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] != c.shape[0]:
            raise ValueError("gram must be square and match the linear term")
        if not np.allclose(g, g.T, rtol=1e-10, atol=1e-12 * max(1.0, np.abs(g).max())):
            raise ValueError("gram matrix must be symmetric")
        g = 0.5 * (g + g.T)
        evals, evecs = np.linalg.eigh(g)
        scale = max(1.0, abs(evals).max())
        if evals.min() < -1e-9 * scale:
            raise ValueError(f"gram matrix is not PSD (min eigenvalue {evals.min():.3g})")
        if evals.min() < 0:
            g = (evecs * np.clip(evals, 0, None)) @ evecs.T
            g = 0.5 * (g + g.T)
        object.__setattr__(self, "gram", g)
        object.__setattr__(self, "linear", c)

    @property
    def n(self) -> int:
        return self.linear.shape[0]

    def objective(self, w) -> float:
        w = np.asarray(w, dtype=float)
        return float(w @ self.gram @ w - 2 * self.linear @ w + self.constant)


@dataclass(frozen=True)
class QpResult:
    weights: np.ndarray
    objective: float
    converged: bool
    iterations: int
    kkt_residual: float


def kkt_residual(p: SimplexQpProblem, w, lip: float | None = None) -> float:
    """Norm of the projected-gradient map at step 1/lip, scaled back by lip."""
    grad = 2 * (p.gram @ w - p.linear)
    if lip is None:
        lip = 2 * np.linalg.eigvalsh(p.gram).max()
    lip = max(lip, 1e-300)
    return float(lip * np.linalg.norm(w - project_simplex(w - grad / lip)))


def _polish(p: SimplexQpProblem, w):
    """Solve the equality-constrained KKT system on the support of ``w``."""
    support = np.flatnonzero(w > 1e-10)
    k = support.shape[0]
    g_s = p.gram[np.ix_(support, support)]
    kkt = np.zeros((k + 1, k + 1))
    kkt[:k, :k] = 2 * g_s
    kkt[:k, k] = 1.0
    kkt[k, :k] = 1.0
    rhs = np.concatenate([2 * p.linear[support], [1.0]])
    sol = np.linalg.lstsq(kkt, rhs, rcond=None)[0]
    if np.any(sol[:k] < 0):
        return None
    out = np.zeros_like(w)
    out[support] = sol[:k]
    out /= out.sum()
    return out


def solve_simplex_qp(p: SimplexQpProblem, tol: float = 1e-10, max_iter: int = 20000, w0=None) -> QpResult:
    """Accelerated projected gradient (FISTA with adaptive restart), then an
    active-set polish on the identified support.

    Deterministic. Returns the best iterate with ``converged=False`` if the
    KKT residual is still above ``tol`` (relative to the problem scale).
    """
    n = p.n
    if n == 1:
        w = np.ones(1)
        return QpResult(w, p.objective(w), True, 0, 0.0)
    raw_scale = max(np.abs(p.gram).max(), np.abs(p.linear).max())
    if raw_scale > 0 and not 1e-8 <= raw_scale <= 1e8:
        # a positive rescaling leaves the minimizer unchanged
        res = solve_simplex_qp(SimplexQpProblem(p.gram / raw_scale, p.linear / raw_scale), tol, max_iter, w0)
        return QpResult(res.weights, p.objective(res.weights), res.converged, res.iterations,
                        res.kkt_residual * raw_scale)
    scale = max(raw_scale, 1e-300)
    lip = 2 * np.linalg.eigvalsh(p.gram).max()
    if lip <= 0:
        w = project_simplex(p.linear)
        return QpResult(w, p.objective(w), True, 0, kkt_residual(p, w))
    w = project_simplex(np.full(n, 1.0 / n) if w0 is None else w0)
    y, t_k = w.copy(), 1.0
    best_w, best_f = w, p.objective(w)
    f_prev = best_f
    it = 0
    res = np.inf
    for it in range(1, max_iter + 1):
        grad = 2 * (p.gram @ y - p.linear)
        w_next = project_simplex(y - grad / lip)
        f_next = p.objective(w_next)
        if f_next > f_prev:
            # adaptive restart
            y, t_k = w.copy(), 1.0
        else:
            t_next = 0.5 * (1 + np.sqrt(1 + 4 * t_k**2))
            y = w_next + ((t_k - 1) / t_next) * (w_next - w)
            w, t_k, f_prev = w_next, t_next, f_next
            if f_next < best_f:
                best_w, best_f = w_next, f_next
        if it % 20 == 0:
            # the support is usually identified long before the iterates converge
            polished = _polish(p, best_w)
            if polished is not None and p.objective(polished) <= best_f + 1e-15 * scale:
                best_w, best_f = polished, p.objective(polished)
            res = kkt_residual(p, best_w, lip)
            if res <= tol * scale:
                break
    polished = _polish(p, best_w)
    if polished is not None and p.objective(polished) <= best_f + 1e-15 * scale:
        best_w, best_f = polished, p.objective(polished)
    res = kkt_residual(p, best_w, lip)
    return QpResult(best_w, best_f, bool(res <= max(tol, 1e-9) * scale), it, res)


def solve_simplex_qp_active_set(p: SimplexQpProblem, w0=None, tol: float = 1e-12, max_iter: int = 1000,
                                ridge: float = 1e-12) -> QpResult:
    """Primal active-set method; exact up to rounding for small problems.

    A ridge ``ridge * max|G|`` on the diagonal keeps each equality-constrained
    subproblem non-singular. Starts from ``w0`` (feasible after projection)
    and alternates full or blocked steps on the free face with releasing the
    fixed coordinate whose multiplier is most negative.
    """
    n = p.n
    if n == 1:
        w = np.ones(1)
        return QpResult(w, p.objective(w), True, 0, 0.0)
    scale = max(np.abs(p.gram).max(), np.abs(p.linear).max(), 1e-300)
    hess = 2 * p.gram + 2 * ridge * np.abs(p.gram).max() * np.eye(n)
    lin = -2 * p.linear
    w = project_simplex(np.full(n, 1.0 / n) if w0 is None else w0)
    free = w > 0
    it = 0
    for it in range(1, max_iter + 1):
        grad = hess @ w + lin
        idx = np.flatnonzero(free)
        k = idx.shape[0]
        kkt = np.zeros((k + 1, k + 1))
        kkt[:k, :k] = hess[np.ix_(idx, idx)]
        kkt[:k, k] = 1.0
        kkt[k, :k] = 1.0
        rhs = np.concatenate([-grad[idx], [0.0]])
        step = np.linalg.lstsq(kkt, rhs, rcond=None)[0][:k]
        if np.linalg.norm(step) <= 1e-14 * (1.0 + np.linalg.norm(w[idx])):
            nu = grad[idx].mean()
            fixed = np.flatnonzero(~free)
            if fixed.shape[0] == 0:
                break
            mult = grad[fixed] - nu
            j = int(np.argmin(mult))
            if mult[j] >= -tol * scale:
                break
            free[fixed[j]] = True
            continue
        alpha, block = 1.0, -1
        neg = step < 0
        if neg.any():
            ratios = -w[idx][neg] / step[neg]
            r = int(np.argmin(ratios))
            if ratios[r] < 1.0:
                alpha, block = float(ratios[r]), int(idx[np.flatnonzero(neg)[r]])
        w = w.copy()
        w[idx] += alpha * step
        w = np.clip(w, 0.0, None)
        if block >= 0:
            w[block] = 0.0
            free[block] = False
        w /= w.sum()
    res = kkt_residual(p, w)
    return QpResult(w, p.objective(w), bool(res <= max(tol, 1e-9) * scale), it, res)
