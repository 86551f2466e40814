"""Benchmark posteriors: truncated Cauchy, truncated Gaussian mixture and
Bayesian logistic regression, with CSV ingestion and AUC evaluation."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit, logsumexp
from scipy.stats import rankdata

from .density import LOG_2PI, AtomFamilyConfig, MixtureDensity, SupportBox, UniformBox, _interval_mass
from .objective import ANALYTIC, JOINT, TargetPosterior


@dataclass(frozen=True)
class CauchyTarget:
    location: float
    scale: float
    box: SupportBox

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("Cauchy scale must be > 0")
        if self.box.d != 1:
            raise ValueError("the Cauchy target is one-dimensional")

    def full_log_pdf(self, z):
        x = (np.asarray(z, dtype=float)[:, 0] - self.location) / self.scale
        return -math.log(math.pi * self.scale) - np.log1p(x**2)

    def mass_in_box(self) -> float:
        lo = (self.box.lower[0] - self.location) / self.scale
        hi = (self.box.upper[0] - self.location) / self.scale
        return (math.atan(hi) - math.atan(lo)) / math.pi

    def posterior(self) -> TargetPosterior:
        log_mass = math.log(self.mass_in_box())
        return TargetPosterior(ANALYTIC, lambda z: self.full_log_pdf(z) - log_mass, 1, True, "cauchy")

    def untruncated(self) -> TargetPosterior:
        return TargetPosterior(ANALYTIC, self.full_log_pdf, 1, True, "cauchy-untruncated")


@dataclass(frozen=True)
class GaussMixTarget:
    """Mixture of isotropic Gaussians, renormalized over ``box``."""

    components: tuple
    box: SupportBox

    def __post_init__(self):
        comps = tuple((float(w), np.atleast_1d(np.asarray(m, dtype=float)), float(s))
                      for w, m, s in self.components)
        if not comps:
            raise ValueError("mixture target needs components")
        weights = np.array([c[0] for c in comps])
        if np.any(weights < 0) or abs(weights.sum() - 1) > 1e-12:
            raise ValueError("component weights must lie on the simplex")
        if any(c[1].shape != (self.box.d,) for c in comps) or any(c[2] <= 0 for c in comps):
            raise ValueError("component means must match the box dimension and sigmas be > 0")
        object.__setattr__(self, "components", comps)

    def full_log_pdf(self, z):
        z = np.asarray(z, dtype=float)
        d = self.box.d
        terms = []
        for w, m, s in self.components:
            sq = np.sum((z - m) ** 2, axis=1)
            terms.append(math.log(w) - 0.5 * sq / s**2 - d * (math.log(s) + 0.5 * LOG_2PI))
        return logsumexp(np.stack(terms), axis=0)

    def mass_in_box(self) -> float:
        total = 0.0
        for w, m, s in self.components:
            total += w * float(np.prod(_interval_mass((self.box.lower - m) / s, (self.box.upper - m) / s)))
        return total

    def posterior(self) -> TargetPosterior:
        log_mass = math.log(self.mass_in_box())
        return TargetPosterior(ANALYTIC, lambda z: self.full_log_pdf(z) - log_mass, self.box.d, True, "gaussmix")

    def untruncated(self) -> TargetPosterior:
        return TargetPosterior(ANALYTIC, self.full_log_pdf, self.box.d, True, "gaussmix-untruncated")


def mixture_target(q: MixtureDensity, name: str = "mixture") -> TargetPosterior:
    """A normalized target equal to a given mixture of atoms."""
    return TargetPosterior(ANALYTIC, lambda z: np.atleast_1d(q.log_pdf(z)), q.d, True, name)


# ---------------------------------------------------------------------------
# logistic regression


@dataclass(frozen=True, eq=False)
class LogisticRegressionModel:
    X: np.ndarray
    y: np.ndarray
    prior_sigma: float = 1.0

    def __post_init__(self):
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y differ in number of rows")
        if np.isnan(X).any():
            raise ValueError("features contain NaN")
        if not np.all((y == 0) | (y == 1)):
            raise ValueError("labels must be 0 or 1")
        if not self.prior_sigma > 0:
            raise ValueError("prior_sigma must be > 0")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def posterior(self) -> TargetPosterior:
        return TargetPosterior(JOINT, lambda w: log_joint_logreg(self, w), self.d, False, "logreg")


def log_joint_logreg(model: LogisticRegressionModel, w):
    """Bernoulli log-likelihood plus the spherical Gaussian log prior.

    ``log sigmoid(a) = -log1p(exp(-a))`` is evaluated via ``logaddexp``.
    Accepts one coefficient vector or an ``(m, d)`` batch.
    """
    w = np.asarray(w, dtype=float)
    single = w.ndim == 1
    W = np.atleast_2d(w)
    if W.shape[1] != model.d:
        raise ValueError(f"coefficient dimension {W.shape[1]} != model dimension {model.d}")
    s2 = model.prior_sigma**2
    prior = -0.5 * np.sum(W**2, axis=1) / s2 - 0.5 * model.d * (LOG_2PI + math.log(s2))
    loglik = np.zeros(W.shape[0])
    chunk = 4096
    for start in range(0, model.X.shape[0], chunk):
        Xc = model.X[start:start + chunk]
        yc = model.y[start:start + chunk]
        a = W @ Xc.T
        loglik += a @ yc - np.sum(np.logaddexp(0.0, a), axis=1)
    out = prior + loglik
    return float(out[0]) if single else out


def grad_log_joint_logreg(model: LogisticRegressionModel, w) -> np.ndarray:
    w = np.asarray(w, dtype=float).reshape(-1)
    a = model.X @ w
    return model.X.T @ (model.y - expit(a)) - w / model.prior_sigma**2


# ---------------------------------------------------------------------------
# datasets


class DatasetError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Dataset:
    X: np.ndarray
    y: np.ndarray
    n_train: int

    def __post_init__(self):
        if not 0 <= self.n_train <= self.y.shape[0]:
            raise DatasetError("n_train out of range")

    @property
    def n_test(self) -> int:
        return self.y.shape[0] - self.n_train

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[: self.n_train], self.y[: self.n_train]

    def test(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X[self.n_train:], self.y[self.n_train:]


@dataclass(frozen=True)
class CsvFormat:
    """Layout of a dataset file: ``label,f1,...,fd`` per line, optional header.

    The first ``n_train`` rows form the training split; None means
    ``round(train_fraction * rows)``.
    """

    n_train: int | None = None
    train_fraction: float = 0.9


def _is_number(token: str) -> bool:
    try:
        float(token)
    except ValueError:
        return False
    return True


def load_dataset(path, fmt: CsvFormat = CsvFormat()) -> Dataset:
    path = Path(path)
    rows, labels = [], []
    width = None
    with path.open(newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not tok.strip() for tok in row):
                continue
            if lineno == 1 and not _is_number(row[0].strip()):
                continue  # header
            try:
                values = [float(tok) for tok in row]
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: malformed row ({exc})") from None
            if len(values) < 2:
                raise DatasetError(f"{path}:{lineno}: expected a label and at least one feature")
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DatasetError(f"{path}:{lineno}: expected {width} columns, found {len(values)}")
            if values[0] not in (0.0, 1.0):
                raise DatasetError(f"{path}:{lineno}: label {row[0]!r} is not 0 or 1")
            labels.append(values[0])
            rows.append(values[1:])
    if not rows:
        raise DatasetError(f"{path}: no data rows")
    n = len(rows)
    n_train = fmt.n_train if fmt.n_train is not None else int(round(fmt.train_fraction * n))
    if not 0 <= n_train <= n:
        raise DatasetError(f"{path}: n_train={n_train} exceeds {n} rows")
    return Dataset(np.array(rows), np.array(labels), n_train)


def write_dataset(path, data: Dataset, header: bool = True) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        if header:
            writer.writerow(["label"] + [f"f{i + 1}" for i in range(data.X.shape[1])])
        for label, feats in zip(data.y, data.X):
            writer.writerow([int(label)] + [repr(float(v)) for v in feats])


def synthetic_chemreact(n_train: int = 2000, n_test: int = 500, d: int = 100, seed: int = 0,
                        feature_scale: float = 0.15, noise: float = 0.5) -> Dataset:
    """ChemReact-shaped synthetic data: binary label plus ``d`` features.

    Labels come from a sparse linear rule plus logistic noise, so classes
    are linearly separable up to that noise.
    """
    rng = np.random.default_rng(seed)
    n = n_train + n_test
    w_true = np.zeros(d)
    active = rng.choice(d, size=max(1, d // 5), replace=False)
    w_true[active] = rng.normal(0.0, 3.0, size=active.shape[0])
    X = rng.normal(0.0, feature_scale, size=(n, d))
    logits = X @ w_true / max(noise, 1e-12)
    y = (rng.random(n) < expit(logits)).astype(float)
    return Dataset(X, y, n_train)


# ---------------------------------------------------------------------------
# evaluation


def auc(scores, labels) -> float:
    """ROC AUC by the Mann-Whitney rank statistic with midranks for ties."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = labels.shape[0] - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined for a single-class test set")
    ranks = rankdata(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def predictive_probabilities(q, X: np.ndarray, n_mc: int, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    W = q.sample(n_mc, rng)
    return expit(X @ W.T).mean(axis=1)


def predictive_auc(q, test: Dataset | tuple, n_mc: int = 500, seed=0) -> float:
    """AUC of posterior-predictive probabilities on the test split."""
    X, y = test.test() if isinstance(test, Dataset) else test
    return auc(predictive_probabilities(q, X, n_mc, seed), y)


def meanfield_init(target: TargetPosterior, family: AtomFamilyConfig, steps: int = 200, seed: int = 0,
                   lmo_config=None) -> MixtureDensity:
    """Single-atom initial mixture: the oracle solution against a flat iterate.

    With q uniform on the box the oracle minimizes ``-E_s[log p]``, i.e. it
    fits one atom of the family to the target.
    """
    from dataclasses import replace

    from .lmo import LmoConfig, stochastic_lmo

    cfg = lmo_config or LmoConfig()
    cfg = replace(cfg, inner_steps=steps, seed=seed)
    res = stochastic_lmo(UniformBox(family.box), target, cfg, family)
    return MixtureDensity.single(res.atom)


def as_model(data: Dataset, prior_sigma: float = 1.0) -> LogisticRegressionModel:
    X, y = data.train()
    return LogisticRegressionModel(X, y, prior_sigma)


__all__: Sequence[str] = [
    "CauchyTarget", "GaussMixTarget", "mixture_target", "LogisticRegressionModel", "log_joint_logreg",
    "grad_log_joint_logreg", "Dataset", "CsvFormat", "DatasetError", "load_dataset", "write_dataset",
    "synthetic_chemreact", "auc", "predictive_auc", "predictive_probabilities", "meanfield_init", "as_model",
]
