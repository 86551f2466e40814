"""Flat, typed experiment configuration files.

One ``section.key = value`` assignment per line; ``#`` starts a comment.
Unknown keys are rejected so a typo in a sweep fails loudly instead of
silently running the default. :func:`dump_config` writes every key (defaults
included) in a fixed order, and parsing that text again gives the same
configuration and the same text.

Example::

    target.kind = cauchy
    family.lower = -5
    family.upper = 5
    family.sigma_min = 0.5
    solver.algorithm = fully_corrective
    solver.T = 15
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .density import AtomFamilyConfig, SupportBox
from .lmo import PROBES, VARIANCE_REDUCTION, GridSpec, LmoConfig
from .solvers import ALGORITHMS, SolverConfig

TARGET_KINDS = ("cauchy", "gaussmix", "logreg")
ORACLES = ("grid", "stochastic")
INITS = ("center", "meanfield")
SYNTHETIC = "synthetic"


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


# ---------------------------------------------------------------------------
# value codecs


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple:
    parts = [p for p in text.replace(",", " ").split() if p]
    if not parts:
        raise ValueError("expected at least one number")
    return tuple(float(p) for p in parts)


def _parse_optional_float(text: str):
    return None if text.lower() == "auto" else float(text)


def _parse_components(text: str) -> tuple:
    """``weight:mean:sigma`` entries separated by ``;``; a mean may hold
    several space-separated coordinates."""
    comps = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(":")
        if len(parts) != 3:
            raise ValueError(f"component {chunk!r} is not weight:mean:sigma")
        comps.append((float(parts[0]), tuple(float(v) for v in parts[1].split()), float(parts[2])))
    if not comps:
        raise ValueError("expected at least one component")
    return tuple(comps)


def _fmt_float(v: float) -> str:
    return repr(float(v))


def _fmt_floats(v) -> str:
    return ", ".join(_fmt_float(x) for x in v)


def _fmt_components(v) -> str:
    return "; ".join(f"{_fmt_float(w)}:{' '.join(_fmt_float(m) for m in mean)}:{_fmt_float(s)}"
                     for w, mean, s in v)


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    fmt: Callable[[Any], str]
    default: Any
    choices: tuple | None = None


def _int_key(default):
    return _Key(int, str, default)


def _float_key(default):
    return _Key(float, _fmt_float, default)


def _bool_key(default):
    return _Key(_parse_bool, lambda v: "true" if v else "false", default)


def _str_key(default, choices=None):
    return _Key(str, str, default, choices)


_LMO_DEFAULTS = LmoConfig()

SCHEMA: dict[str, _Key] = {
    "seed": _int_key(0),
    "output.dir": _str_key("runs"),
    "target.kind": _str_key(None, TARGET_KINDS),
    "target.location": _float_key(0.0),
    "target.scale": _float_key(1.0),
    "target.components": _Key(_parse_components, _fmt_components, ((0.5, (-2.0,), 0.6), (0.5, (2.0,), 0.8))),
    "target.dataset": _str_key(SYNTHETIC),
    "target.train_fraction": _float_key(0.9),
    "target.n_train": _int_key(2000),
    "target.n_test": _int_key(500),
    "target.features": _int_key(100),
    "target.feature_scale": _float_key(0.15),
    "target.noise": _float_key(0.5),
    "target.data_seed": _int_key(0),
    "target.prior_sigma": _float_key(1.0),
    "family.dim": _int_key(1),
    "family.lower": _Key(_parse_floats, _fmt_floats, (-5.0,)),
    "family.upper": _Key(_parse_floats, _fmt_floats, (5.0,)),
    "family.sigma_min": _float_key(0.5),
    "family.sigma_max": _float_key(2.0),
    "family.mean_stride": _float_key(0.0),
    "solver.algorithm": _str_key(None, ALGORITHMS),
    "solver.T": _int_key(30),
    "solver.L_surrogate": _float_key(15.0),
    "solver.curvature": _Key(_parse_optional_float, lambda v: "auto" if v is None else _fmt_float(v), None),
    "solver.early_stop": _bool_key(True),
    "solver.correct_atoms": _bool_key(False),
    "solver.inner_max_iter": _int_key(200),
    "solver.oracle": _str_key("stochastic", ORACLES),
    "solver.grid_means": _int_key(81),
    "solver.grid_sigmas": _Key(_parse_floats, _fmt_floats, (0.5, 1.0, 2.0)),
    "solver.lmo.inner_steps": _int_key(_LMO_DEFAULTS.inner_steps),
    "solver.lmo.step_size": _float_key(_LMO_DEFAULTS.step_size),
    "solver.lmo.samples_per_step": _int_key(_LMO_DEFAULTS.samples_per_step),
    "solver.lmo.n_restarts": _int_key(_LMO_DEFAULTS.n_restarts),
    "solver.lmo.learn_sigma": _bool_key(_LMO_DEFAULTS.learn_sigma),
    "solver.lmo.variance_reduction": _str_key(_LMO_DEFAULTS.variance_reduction, VARIANCE_REDUCTION),
    "solver.lmo.probe": _str_key(_LMO_DEFAULTS.probe, PROBES),
    "solver.init": _str_key("center", INITS),
    "solver.init.steps": _int_key(200),
    "solver.init.step_size": _float_key(0.02),
    "solver.init.samples_per_step": _int_key(128),
    "solver.init.n_restarts": _int_key(2),
    "engine.n_samples": _int_key(2000),
    "engine.panels": _int_key(0),
    "metrics.kl_quadrature": _bool_key(False),
    "metrics.kl_mc": _bool_key(True),
    "metrics.kl_mc_samples": _int_key(20000),
    "metrics.auc": _bool_key(False),
    "metrics.auc_samples": _int_key(500),
}

_PATH_KEYS = ("target.dataset",)


@dataclass(frozen=True)
class ExperimentConfig:
    """A validated experiment. ``values`` maps every schema key to its value."""

    values: dict
    source: Path | None = None

    def __getitem__(self, key: str):
        return self.values[key]

    @property
    def d(self) -> int:
        return self.values["family.dim"]

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output.dir"])

    @property
    def seed(self) -> int:
        return self.values["seed"]

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        """A re-validated copy with some keys replaced."""
        unknown = [k for k in overrides if k not in SCHEMA]
        if unknown:
            raise ConfigError(unknown[0], "unknown key")
        values = dict(self.values)
        values.update(overrides)
        return validate(values, self.source)

    # -- builders --------------------------------------------------------

    def box(self) -> SupportBox:
        d = self.d
        lower = np.broadcast_to(np.array(self["family.lower"]), (d,))
        upper = np.broadcast_to(np.array(self["family.upper"]), (d,))
        return SupportBox(lower.copy(), upper.copy())

    def family(self) -> AtomFamilyConfig:
        return AtomFamilyConfig(self.box(), self["family.sigma_min"], self["family.sigma_max"],
                                self["family.mean_stride"])

    def lmo(self) -> LmoConfig | GridSpec:
        if self["solver.oracle"] == "grid":
            return GridSpec((self["solver.grid_means"],) * self.d, tuple(self["solver.grid_sigmas"]))
        return LmoConfig(
            inner_steps=self["solver.lmo.inner_steps"], step_size=self["solver.lmo.step_size"],
            samples_per_step=self["solver.lmo.samples_per_step"], n_restarts=self["solver.lmo.n_restarts"],
            learn_sigma=self["solver.lmo.learn_sigma"],
            variance_reduction=self["solver.lmo.variance_reduction"], probe=self["solver.lmo.probe"],
            seed=self.seed)

    def init_lmo(self) -> LmoConfig:
        return LmoConfig(step_size=self["solver.init.step_size"],
                         samples_per_step=self["solver.init.samples_per_step"],
                         n_restarts=self["solver.init.n_restarts"])

    def solver(self, init=None) -> SolverConfig:
        return SolverConfig(
            algorithm=self["solver.algorithm"], T=self["solver.T"], L_surrogate=self["solver.L_surrogate"],
            curvature=self["solver.curvature"], lmo=self.lmo(), init=init, seed=self.seed,
            correct_atoms=self["solver.correct_atoms"], early_stop=self["solver.early_stop"],
            inner_max_iter=self["solver.inner_max_iter"])


# ---------------------------------------------------------------------------
# parsing and validation


def parse_text(text: str, origin: str = "<config>") -> dict:
    """Raw ``key -> value`` assignments, typed by the schema."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value' in {origin}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, f"unknown key (line {lineno} of {origin})")
        if key in values:
            raise ConfigError(key, f"assigned twice (line {lineno} of {origin})")
        try:
            values[key] = SCHEMA[key].parse(value)
        except ValueError as exc:
            raise ConfigError(key, f"invalid value {value!r}: {exc}") from None
    return values


def _resolve_path(value: str, base: Path | None) -> str:
    if value == SYNTHETIC:
        return value
    p = Path(value)
    if not p.is_absolute() and base is not None:
        p = base / p
    return str(p.resolve())


def validate(raw: dict, source: Path | None = None) -> ExperimentConfig:
    """Fill defaults, check types and ranges, and resolve input paths.

    Relative dataset paths are taken relative to the config file.
    """
    values = {}
    for key, spec in SCHEMA.items():
        value = raw.get(key, spec.default)
        if value is None and spec.default is None and key != "solver.curvature":
            raise ConfigError(key, "required key is missing")
        if spec.choices is not None and value not in spec.choices:
            raise ConfigError(key, f"must be one of {', '.join(spec.choices)}; got {value!r}")
        values[key] = value
    base = source.parent if source is not None else None
    for key in _PATH_KEYS:
        values[key] = _resolve_path(values[key], base)

    def positive(key):
        if not values[key] > 0:
            raise ConfigError(key, f"must be > 0; got {values[key]!r}")

    def at_least(key, low):
        if values[key] < low:
            raise ConfigError(key, f"must be >= {low}; got {values[key]!r}")

    for key in ("target.scale", "target.feature_scale", "target.noise", "target.prior_sigma",
                "family.sigma_min", "family.sigma_max", "solver.L_surrogate", "solver.lmo.step_size",
                "solver.init.step_size"):
        positive(key)
    for key, low in (("family.dim", 1), ("solver.T", 1), ("solver.inner_max_iter", 1), ("solver.grid_means", 1),
                     ("solver.lmo.inner_steps", 0), ("solver.lmo.samples_per_step", 2),
                     ("solver.lmo.n_restarts", 1), ("solver.init.steps", 0),
                     ("solver.init.samples_per_step", 2), ("solver.init.n_restarts", 1),
                     ("engine.n_samples", 2), ("engine.panels", 0), ("metrics.kl_mc_samples", 2),
                     ("metrics.auc_samples", 1), ("target.n_train", 1), ("target.n_test", 0),
                     ("target.features", 1)):
        at_least(key, low)
    if values["family.mean_stride"] < 0:
        raise ConfigError("family.mean_stride", "must be >= 0")
    if values["family.sigma_max"] < values["family.sigma_min"]:
        raise ConfigError("family.sigma_max", "must be >= family.sigma_min")
    if values["solver.curvature"] is not None and not values["solver.curvature"] > 0:
        raise ConfigError("solver.curvature", "must be > 0 or auto")
    if not 0 < values["target.train_fraction"] <= 1:
        raise ConfigError("target.train_fraction", "must lie in (0, 1]")
    if any(s <= 0 for s in values["solver.grid_sigmas"]):
        raise ConfigError("solver.grid_sigmas", "sigmas must be > 0")

    kind = values["target.kind"]
    d = values["family.dim"]
    for key in ("family.lower", "family.upper"):
        if len(values[key]) not in (1, d):
            raise ConfigError(key, f"expected 1 or {d} numbers, got {len(values[key])}")
        if not all(math.isfinite(v) for v in values[key]):
            raise ConfigError(key, "bounds must be finite (the family needs a compact support)")
    lower = np.broadcast_to(np.array(values["family.lower"]), (d,))
    upper = np.broadcast_to(np.array(values["family.upper"]), (d,))
    if np.any(upper <= lower):
        raise ConfigError("family.upper", "must exceed family.lower in every coordinate")

    if kind == "cauchy" and d != 1:
        raise ConfigError("family.dim", "the Cauchy target is one-dimensional")
    if kind == "gaussmix":
        comps = values["target.components"]
        if any(len(m) != d for _, m, _ in comps):
            raise ConfigError("target.components", f"component means must have {d} coordinates")
        weights = np.array([w for w, _, _ in comps])
        if np.any(weights < 0) or abs(weights.sum() - 1) > 1e-9:
            raise ConfigError("target.components", "weights must be non-negative and sum to 1")
        if any(s <= 0 for _, _, s in comps):
            raise ConfigError("target.components", "sigmas must be > 0")
    if kind == "logreg":
        if values["target.dataset"] == SYNTHETIC:
            if values["target.features"] != d:
                raise ConfigError("target.features", f"must equal family.dim ({d})")
        elif not Path(values["target.dataset"]).is_file():
            raise ConfigError("target.dataset", f"file not found: {values['target.dataset']}")
    if values["metrics.auc"] and kind != "logreg":
        raise ConfigError("metrics.auc", "AUC is only defined for the logistic-regression target")
    if values["metrics.kl_quadrature"] and d > 2:
        raise ConfigError("metrics.kl_quadrature", f"quadrature needs dimension <= 2, got {d}")
    if values["solver.oracle"] == "grid" and d > 2:
        raise ConfigError("solver.oracle", f"the grid oracle needs dimension <= 2, got {d}")
    if values["solver.correct_atoms"] and values["solver.oracle"] == "grid":
        raise ConfigError("solver.correct_atoms", "atom correction needs the stochastic oracle")
    if (values["solver.algorithm"] == "fw_linesearch" and values["solver.curvature"] is None):
        from .objective import objective_constants

        cf = objective_constants(AtomFamilyConfig(SupportBox(lower.copy(), upper.copy()),
                                                  values["family.sigma_min"], values["family.sigma_max"],
                                                  values["family.mean_stride"])).curvature_bound
        if not math.isfinite(cf):
            raise ConfigError("solver.curvature", "the curvature bound overflows for this family; set it explicitly")
    return ExperimentConfig(values, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("config", f"cannot read {path}: {exc.strerror or exc}") from None
    return validate(parse_text(text, str(path)), path.resolve())


def dump_config(cfg: ExperimentConfig) -> str:
    """Every key in schema order; parsing the result reproduces ``cfg``."""
    lines = [f"{key} = {SCHEMA[key].fmt(cfg.values[key])}" for key in SCHEMA]
    return "\n".join(lines) + "\n"


def non_solver_differences(a: ExperimentConfig, b: ExperimentConfig) -> list[str]:
    """Keys outside the ``solver.`` section (and other than the output
    directory) whose values differ."""
    return [k for k in SCHEMA
            if not k.startswith("solver.") and k != "output.dir" and a.values[k] != b.values[k]]
