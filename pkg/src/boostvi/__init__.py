"""Boosting variational inference with truncated Gaussian atoms."""

from .density import (
    AtomFamilyConfig,
    MixtureDensity,
    SupportBox,
    TruncatedGaussianAtom,
    UniformBox,
    family_bounds,
    family_diameter_sq,
    inner_product,
    make_atom,
    quantize_mean,
    truncation_mass,
)
from .integrate import McEstimate, McSpec, QuadratureSpec, expectation_mc, integrate_box
from .lmo import GridSpec, LmoConfig, LmoResult, grid_lmo, measure_delta, project_params, score_gradient, stochastic_lmo
from .objective import (
    MonteCarloEngine,
    QuadratureEngine,
    TargetPosterior,
    duality_gap,
    grad_log_ratio,
    kl_estimate,
    make_engine,
    objective_constants,
    rate_constant,
    truncation_loss,
)
from .qp import SimplexQpProblem, solve_simplex_qp
from .solvers import ConvergenceTrace, SolverConfig, run
from .targets import (
    CauchyTarget,
    Dataset,
    GaussMixTarget,
    LogisticRegressionModel,
    load_dataset,
    log_joint_logreg,
    meanfield_init,
    predictive_auc,
    synthetic_chemreact,
)

__version__ = "0.1.0"

__all__ = [
    "AtomFamilyConfig", "MixtureDensity", "SupportBox", "TruncatedGaussianAtom", "UniformBox",
    "family_bounds", "family_diameter_sq", "inner_product", "make_atom", "quantize_mean", "truncation_mass",
    "McEstimate", "McSpec", "QuadratureSpec", "expectation_mc", "integrate_box",
    "GridSpec", "LmoConfig", "LmoResult", "grid_lmo", "measure_delta", "project_params", "score_gradient",
    "stochastic_lmo",
    "MonteCarloEngine", "QuadratureEngine", "TargetPosterior", "duality_gap", "grad_log_ratio", "kl_estimate",
    "make_engine", "objective_constants", "rate_constant", "truncation_loss",
    "SimplexQpProblem", "solve_simplex_qp",
    "ConvergenceTrace", "SolverConfig", "run",
    "CauchyTarget", "Dataset", "GaussMixTarget", "LogisticRegressionModel", "load_dataset", "log_joint_logreg",
    "meanfield_init", "predictive_auc", "synthetic_chemreact",
]
