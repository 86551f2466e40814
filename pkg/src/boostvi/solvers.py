"""Greedy outer loops for boosting variational inference.

Four update rules share one driver, :func:`run`:

``fw_fixed``
    Frank-Wolfe with the open-loop step ``gamma = 2 / (t + 2)``.
``fw_linesearch``
    Frank-Wolfe with ``gamma = clip(gap / curvature, 0, 1)``.
``norm_corrective``
    Re-weights every active atom to minimize ``||z - b||^2`` over their hull,
    where ``b = q - grad f(q) / L``.
``fully_corrective``
    Re-weights every active atom to minimize the KL objective itself.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .density import AtomFamilyConfig, MixtureDensity, TruncatedGaussianAtom, make_atom
from .integrate import McEstimate
from .lmo import GridSpec, LmoConfig, LmoResult, OracleFailure, grid_atoms, grid_lmo, refine_atom, stochastic_lmo
from .objective import PointSet, QuadratureEngine, TargetPosterior, make_engine, objective_constants
from .qp import SimplexQpProblem, solve_simplex_qp, solve_simplex_qp_active_set

ALGORITHMS = ("fw_fixed", "fw_linesearch", "norm_corrective", "fully_corrective")
WEIGHT_FLOOR = 1e-12
STALL_GAP = 1e-6  # below this a stalled line search means rounding, not failure
TRACE_COLUMNS = ("t", "objective", "objective_stderr", "gamma", "gap", "gap_stderr", "lmo_value",
                 "active_atoms", "wallclock_ms")


class SolverError(RuntimeError):
    """Raised when the oracle fails; ``trace`` holds the iterations completed so far."""

    def __init__(self, message: str, trace: "ConvergenceTrace"):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class SolverConfig:
    """Outer-loop settings.

    ``curvature=None`` takes the bound from :func:`objective_constants`.
    ``init=None`` starts from one atom at the box centre with the largest
    sigma. With ``early_stop`` the run ends once the duality gap has been
    non-positive within noise for three consecutive iterations.
    """

    algorithm: str
    T: int
    L_surrogate: float = 15.0
    curvature: float | None = None
    lmo: LmoConfig | GridSpec = field(default_factory=LmoConfig)
    init: MixtureDensity | None = None
    seed: int = 0
    correct_atoms: bool = False
    early_stop: bool = True
    inner_max_iter: int = 200
    inner_tol: float = 1e-10
    qp_tol: float = 1e-10

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not self.L_surrogate > 0:
            raise ValueError("L_surrogate must be > 0")
        if self.curvature is not None and not self.curvature > 0:
            raise ValueError("curvature must be > 0")
        if self.correct_atoms and not isinstance(self.lmo, LmoConfig):
            raise ValueError("atom correction needs the stochastic oracle")


@dataclass(frozen=True)
class TraceRecord:
    t: int
    objective: float
    objective_stderr: float
    gamma: float | None
    gap: float | None
    gap_stderr: float | None
    lmo_value: float | None
    active_atoms: int
    weights: tuple
    atoms: tuple
    wallclock_ms: float
    event: str = ""


@dataclass
class ConvergenceTrace:
    algorithm: str
    metric: str
    records: list = field(default_factory=list)
    converged: bool = False
    final: MixtureDensity | None = None
    curvature: float | None = None

    def append(self, rec: TraceRecord) -> None:
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.objective for r in self.records])

    @property
    def events(self) -> list[tuple[int, str]]:
        return [(r.t, r.event) for r in self.records if r.event]

    def rows(self, timing: bool = False) -> list[list[str]]:
        """CSV rows in :data:`TRACE_COLUMNS` order; missing values are blank.

        Wall-clock times are left blank unless ``timing`` is set, so that
        traces of identical runs are byte-identical.
        """
        def fmt(v):
            return "" if v is None else repr(float(v))
        out = []
        for r in self.records:
            out.append([str(r.t), fmt(r.objective), fmt(r.objective_stderr), fmt(r.gamma), fmt(r.gap),
                        fmt(r.gap_stderr), fmt(r.lmo_value), str(r.active_atoms),
                        fmt(r.wallclock_ms) if timing else ""])
        return out


# ---------------------------------------------------------------------------
# step rules


def fw_gamma(t: int) -> float:
    return 2.0 / (t + 2.0)


def fw_step_fixed(q: MixtureDensity, t: int, s: TruncatedGaussianAtom) -> MixtureDensity:
    return q.with_atom(s, fw_gamma(t))


def linesearch_gamma(gap: float, curvature: float) -> float:
    if not curvature > 0:
        raise ValueError("curvature must be > 0")
    if not gap > 0:
        return 0.0
    return min(1.0, gap / curvature)


def fw_step_linesearch(q: MixtureDensity, s: TruncatedGaussianAtom, gap: float, curvature: float):
    """Returns ``(q_next, gamma)``; a non-positive gap leaves q unchanged."""
    gamma = linesearch_gamma(gap, curvature)
    if gamma == 0.0:
        return q, 0.0
    return q.with_atom(s, gamma), gamma


def active_set(q: MixtureDensity, s: TruncatedGaussianAtom) -> tuple[list, np.ndarray]:
    """Atoms of q with weight above the floor, plus s (merged if present)."""
    atoms, weights = [], []
    for a, w in zip(q.atoms, q.weights):
        if w > WEIGHT_FLOOR:
            atoms.append(a)
            weights.append(w)
    if not any(a.same_as(s) for a in atoms):
        atoms.append(s)
        weights.append(0.0)
    w = np.array(weights)
    return atoms, w / w.sum()


def _mixture_from(atoms: Sequence[TruncatedGaussianAtom], w: np.ndarray) -> MixtureDensity:
    w = np.where(w < WEIGHT_FLOOR, 0.0, np.clip(w, 0.0, None))
    keep = w > 0
    w = w[keep]
    return MixtureDensity([a for a, k in zip(atoms, keep) if k], w / w.sum())


def norm_qp_problem(q_weights: np.ndarray, gram: np.ndarray, lin: np.ndarray, L: float) -> SimplexQpProblem:
    """QP for ``min ||sum_i w_i s_i - b||^2`` with ``b = q - g / L``.

    ``c_i = <s_i, q> - E_{s_i}[g] / L``; ``<s_i, q> = (G w_q)_i`` because q is
    a combination of the same atoms. The constant ``<b, b>`` does not move
    the minimizer and is left at zero.
    """
    return SimplexQpProblem(gram, gram @ q_weights - lin / L)


@dataclass(frozen=True)
class NormStepResult:
    mixture: MixtureDensity | None
    converged: bool
    L_used: float
    backtracks: int


def norm_corrective_step(q: MixtureDensity, s: TruncatedGaussianAtom, L: float, engine, qp_tol: float = 1e-10,
                         atoms=None, q_weights=None, max_backtracks: int = 200) -> NormStepResult:
    """Surrogate projection step with a backtracked smoothness estimate.

    ``L`` is the starting estimate. While the step raises the objective
    (measured on one common point set) ``L`` is doubled and the QP is solved
    again; a large enough ``L`` always yields descent because the step then
    follows the negative gradient. A non-converged QP returns
    ``mixture=None``.
    """
    if atoms is None:
        atoms, q_weights = active_set(q, s)
    if len(atoms) == 1:
        return NormStepResult(MixtureDensity.single(atoms[0]), True, L, 0)
    gram = engine.gram(atoms)
    lin, _ = engine.linear(q, atoms)
    ps = engine.point_set(atoms)
    f0 = ps.objective(q_weights)
    L_k = L
    for k in range(max_backtracks + 1):
        res = solve_simplex_qp(norm_qp_problem(q_weights, gram, lin, L_k), tol=qp_tol, w0=q_weights)
        if not res.converged:
            return NormStepResult(None, False, L_k, k)
        f_new = ps.objective(res.weights)
        if f_new <= f0:
            return NormStepResult(_mixture_from(atoms, res.weights), True, L_k, k)
        L_k *= 2.0
    # no descent found at any L: keep q
    return NormStepResult(_mixture_from(atoms, q_weights), True, L_k, max_backtracks)


@dataclass(frozen=True)
class InnerResult:
    weights: np.ndarray
    objective: float
    converged: bool
    iterations: int
    gap: float


def minimize_on_points(ps: PointSet, w0: np.ndarray, tol: float = 1e-10, max_iter: int = 200) -> InnerResult:
    """Minimize the convex point-set objective over the simplex.

    Each iteration solves the quadratic model (exact Hessian) over the
    simplex and backtracks along the resulting direction (Armijo). It stops
    when the simplex duality gap ``grad.w - min_i grad_i`` is below ``tol``.
    """
    w = np.asarray(w0, dtype=float).copy()
    n = w.shape[0]
    f = ps.objective(w)
    gap = math.inf
    if n == 1:
        return InnerResult(np.ones(1), f, True, 0, 0.0)
    for it in range(1, max_iter + 1):
        grad = ps.gradient(w)
        gap = float(grad @ w - grad.min())
        if gap <= tol:
            return InnerResult(w, f, True, it - 1, gap)
        hess = ps.hessian(w)
        hess = 0.5 * (hess + hess.T)
        qp = solve_simplex_qp_active_set(SimplexQpProblem(0.5 * hess, 0.5 * (hess @ w - grad)), w0=w)
        direction = qp.weights - w
        slope = float(grad @ direction)
        if slope >= 0:
            # the model step fails to descend; use the Frank-Wolfe vertex instead
            direction = -w.copy()
            direction[int(np.argmin(grad))] += 1.0
            slope = float(grad @ direction)
        step = 1.0
        while True:
            w_new = w + step * direction
            w_new = np.clip(w_new, 0.0, None)
            w_new /= w_new.sum()
            f_new = ps.objective(w_new)
            if f_new <= f + 1e-4 * step * slope or step < 1e-12:
                break
            step *= 0.5
        if f_new > f:
            # no representable descent left: accept if the gap is at rounding level
            return InnerResult(w, f, gap <= max(tol, STALL_GAP), it, gap)
        stagnant = f - f_new <= 1e-14 * max(1.0, abs(f))
        w, f = w_new, f_new
        if stagnant and gap <= STALL_GAP:
            return InnerResult(w, f, True, it, gap)
    grad = ps.gradient(w)
    gap = float(grad @ w - grad.min())
    return InnerResult(w, f, gap <= tol, max_iter, gap)


def fully_corrective_step(q: MixtureDensity, s: TruncatedGaussianAtom, engine, tol: float = 1e-10,
                          max_iter: int = 200, atoms=None, q_weights=None):
    """Returns ``(q_next, InnerResult)``; the KL is minimized over the hull of
    the active atoms on the engine's fixed point set (quadrature nodes, or
    common random numbers drawn once per step)."""
    if atoms is None:
        atoms, q_weights = active_set(q, s)
    ps = engine.point_set(atoms)
    inner = minimize_on_points(ps, q_weights, tol=tol, max_iter=max_iter)
    return _mixture_from(atoms, inner.weights), inner


# ---------------------------------------------------------------------------
# driver


def default_init(family: AtomFamilyConfig) -> MixtureDensity:
    return MixtureDensity.single(make_atom(family.box.center, family.sigma_max, family))


def _iteration_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed, t]).generate_state(1)[0])


def _gap_is_nonpositive(gap: McEstimate, scale: float) -> bool:
    return gap.value <= max(gap.stderr, 1e-9 * max(1.0, abs(scale)))


class _Oracle:
    def __init__(self, config: SolverConfig, family: AtomFamilyConfig, target: TargetPosterior, engine):
        self.config, self.family, self.target, self.engine = config, family, target, engine
        self.grid = None
        if isinstance(config.lmo, GridSpec):
            if not isinstance(engine, QuadratureEngine):
                raise ValueError("the grid oracle needs a quadrature engine (d <= 2)")
            self.grid = grid_atoms(family, config.lmo)

    def __call__(self, q: MixtureDensity, t: int) -> LmoResult:
        if self.grid is not None:
            return grid_lmo(q, self.target, self.family, self.config.lmo, engine=self.engine, atoms=self.grid)
        cfg = replace(self.config.lmo, seed=_iteration_seed(self.config.seed, t))
        return stochastic_lmo(q, self.target, cfg, self.family)


def _correct_atoms(q: MixtureDensity, config: SolverConfig, family, target, t: int) -> MixtureDensity:
    """Re-fit each active atom against the current gradient (one chain each)."""
    cfg = replace(config.lmo, seed=_iteration_seed(config.seed + 1, t), n_restarts=1)
    atoms = []
    for a in q.atoms:
        atoms.append(refine_atom(a, q, target, cfg, family).atom)
    merged_atoms, merged_w = [], []
    for a, w in zip(atoms, q.weights):
        for i, b in enumerate(merged_atoms):
            if b.same_as(a):
                merged_w[i] += w
                break
        else:
            merged_atoms.append(a)
            merged_w.append(w)
    return MixtureDensity(merged_atoms, np.array(merged_w))


def run(config: SolverConfig, family: AtomFamilyConfig, target: TargetPosterior, engine=None) -> ConvergenceTrace:
    """Run ``config.T`` boosting iterations and record the trace.

    Row ``t`` describes ``q^t``: its objective estimate, and for t >= 1 the
    step size, duality gap and oracle value of the step that produced it
    (gap and oracle value are measured at ``q^{t-1}``).
    """
    if engine is None:
        engine = make_engine(target, family.box, seed=config.seed)
    curvature = config.curvature
    if config.algorithm == "fw_linesearch" and curvature is None:
        curvature = objective_constants(family).curvature_bound
        if not math.isfinite(curvature):
            raise ValueError("curvature bound overflows; set solver.curvature explicitly")
    oracle = _Oracle(config, family, target, engine)
    q = config.init if config.init is not None else default_init(family)
    trace = ConvergenceTrace(config.algorithm, target.metric_name, curvature=curvature)
    start = time.perf_counter()

    def record(t, est, gamma=None, gap=None, lmo_value=None, event=""):
        trace.append(TraceRecord(
            t=t, objective=est.value, objective_stderr=est.stderr, gamma=gamma,
            gap=None if gap is None else gap.value, gap_stderr=None if gap is None else gap.stderr,
            lmo_value=lmo_value, active_atoms=q.active_atoms, weights=tuple(q.weights.tolist()),
            atoms=tuple(a.key for a in q.atoms), wallclock_ms=1e3 * (time.perf_counter() - start),
            event=event))

    f_est = engine.objective(q)
    record(0, f_est)
    quiet = 0
    for t in range(config.T):
        try:
            res = oracle(q, t)
        except (OracleFailure, FloatingPointError) as exc:
            trace.final = q
            raise SolverError(f"oracle failed at iteration {t}: {exc}", trace) from exc
        s = res.atom
        lin_val, lin_err = engine.linear(q, [s])
        gap = McEstimate(f_est.value - float(lin_val[0]), math.hypot(f_est.stderr, float(lin_err[0])), f_est.n)
        event = ""
        alg = config.algorithm
        if alg == "fw_fixed":
            gamma = fw_gamma(t)
            q = fw_step_fixed(q, t, s)
        elif alg == "fw_linesearch":
            q, gamma = fw_step_linesearch(q, s, gap.value, curvature)
            if gamma == 0.0:
                event = "stall"
        else:
            atoms, w0 = active_set(q, s)
            if alg == "norm_corrective":
                step = norm_corrective_step(q, s, config.L_surrogate, engine, config.qp_tol, atoms, w0)
                q_new = step.mixture
                if not step.converged:
                    fallback = curvature or objective_constants(family).curvature_bound
                    q_new, _ = fw_step_linesearch(q, s, gap.value, fallback)
                    event = "qp_fallback"
                elif step.backtracks:
                    event = f"L_backtrack:{step.L_used:g}"
            else:
                q_new, inner = fully_corrective_step(q, s, engine, config.inner_tol, config.inner_max_iter,
                                                     atoms, w0)
                if not inner.converged:
                    event = "inner_budget"
            q = q_new
            gamma = None
        if config.correct_atoms:
            q = _correct_atoms(q, config, family, target, t)
        f_est = engine.objective(q)
        record(t + 1, f_est, gamma, gap, float(lin_val[0]), event)
        if config.early_stop:
            quiet = quiet + 1 if _gap_is_nonpositive(gap, f_est.value) else 0
            if quiet >= 3:
                trace.converged = True
                break
    trace.final = q
    return trace


# ---------------------------------------------------------------------------
# rate checks


def sublinear_envelope(t, curvature: float, eps0: float = 0.0):
    """``2 (C_f + eps0) / (t + 2)``."""
    return 2.0 * (curvature + eps0) / (np.asarray(t, dtype=float) + 2.0)


def fit_geometric_decay(values, floor: float = 1e-10) -> tuple[float, float]:
    """Least-squares line through ``log(values)`` for entries above ``floor``.

    Returns ``(slope, r_squared)``.
    """
    v = np.asarray(values, dtype=float)
    idx = np.flatnonzero(v > floor)
    if idx.shape[0] < 3:
        raise ValueError("need at least three values above the floor")
    x = idx.astype(float)
    y = np.log(v[idx])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return float(slope), r2
