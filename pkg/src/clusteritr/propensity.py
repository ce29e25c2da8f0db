"""Factored propensity scores.

Treatments within a cluster are independent given covariates, so the joint
probability of a treatment vector is the product of unit-level probabilities.
Every model here produces ``P(A_ij = 1 | X_i)`` per unit and refuses to return
probabilities outside ``[eta, 1 - eta]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .data import Cluster, ClusterDataset, DimensionMismatchError

DEFAULT_ETA = 0.01


class PositivityError(ValueError):
    """A propensity fell outside ``[eta, 1 - eta]``."""


class PropensityFitError(RuntimeError):
    """Logistic fit failed (separation or non-convergence)."""


def _check_eta(eta: float) -> float:
    eta = float(eta)
    if not 0.0 < eta <= 0.5:
        raise ValueError(f"eta must lie in (0, 0.5], got {eta}")
    return eta


def _check_positivity(e1: np.ndarray, eta: float, where: str = "") -> np.ndarray:
    bad = (e1 < eta) | (e1 > 1.0 - eta) | ~np.isfinite(e1)
    if bad.any():
        k = int(np.flatnonzero(bad)[0])
        raise PositivityError(
            f"propensity {e1[k]!r} at unit {k}{where} is outside [{eta}, {1 - eta}]"
        )
    return e1


class PropensityModel:
    """Base class: subclasses implement :meth:`_raw_probs`."""

    eta: float = DEFAULT_ETA
    kind: str = ""

    def _raw_probs(self, x: np.ndarray, known: np.ndarray | None) -> np.ndarray:
        raise NotImplementedError

    def unit_probs(self, dataset: ClusterDataset) -> np.ndarray:
        """``P(A_ij = 1 | X_i)`` for every unit of ``dataset`` (flat array)."""
        e1 = np.asarray(self._raw_probs(dataset.x, dataset.propensity), dtype=float)
        return _check_positivity(e1, self.eta)

    def cluster_probs(self, cluster: Cluster) -> np.ndarray:
        e1 = np.asarray(self._raw_probs(cluster.covariates, cluster.propensity), dtype=float)
        return _check_positivity(e1, self.eta, f" of cluster {cluster.id!r}")

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class KnownConstant(PropensityModel):
    """Every unit is treated with the same known probability ``q``."""

    q: float
    eta: float = DEFAULT_ETA
    kind = "known_constant"

    def __post_init__(self):
        _check_eta(self.eta)
        _check_positivity(np.array([float(self.q)]), self.eta)

    def _raw_probs(self, x, known):
        return np.full(x.shape[0], float(self.q))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "q": self.q, "eta": self.eta}


@dataclass(frozen=True)
class KnownTable(PropensityModel):
    """Known per-unit probabilities carried by the dataset's ``e1`` column."""

    eta: float = DEFAULT_ETA
    kind = "known_table"

    def __post_init__(self):
        _check_eta(self.eta)

    def _raw_probs(self, x, known):
        if known is None:
            raise ValueError("dataset carries no known propensities (e1 column)")
        return known

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eta": self.eta}


@dataclass(frozen=True, eq=False)
class FittedLogistic(PropensityModel):
    """Pooled logistic model ``P(A=1|x) = expit(intercept + x @ slopes)``."""

    intercept: float
    slopes: np.ndarray
    eta: float = DEFAULT_ETA
    cov: np.ndarray | None = field(default=None, repr=False)
    n_iter: int = 0
    converged: bool = True
    kind = "fitted_logistic"

    def __post_init__(self):
        _check_eta(self.eta)
        object.__setattr__(self, "slopes", np.asarray(self.slopes, dtype=float).ravel())

    def _raw_probs(self, x, known):
        if x.shape[1] != self.slopes.size:
            raise DimensionMismatchError(f"model has {self.slopes.size} slopes, data has {x.shape[1]} covariates")
        return expit(self.intercept + x @ self.slopes)

    def std_errors(self) -> np.ndarray | None:
        """Standard errors of (intercept, slopes) from the inverse Fisher information."""
        return None if self.cov is None else np.sqrt(np.diag(self.cov))

    def to_dict(self) -> dict:
        return {"intercept": float(self.intercept), "slopes": self.slopes.tolist(), "eta": self.eta}


@dataclass(frozen=True, eq=False)
class StratifiedLogistic(PropensityModel):
    """One :class:`FittedLogistic` per cluster size."""

    models: dict
    eta: float = DEFAULT_ETA
    kind = "stratified_logistic"

    def unit_probs(self, dataset: ClusterDataset) -> np.ndarray:
        sizes = np.repeat(dataset.sizes, dataset.sizes)
        e1 = np.empty(dataset.n_units)
        for m in np.unique(sizes):
            if int(m) not in self.models:
                raise ValueError(f"no propensity model for cluster size {int(m)}")
            mask = sizes == m
            e1[mask] = self.models[int(m)]._raw_probs(dataset.x[mask], None)
        return _check_positivity(e1, self.eta)

    def cluster_probs(self, cluster: Cluster) -> np.ndarray:
        if cluster.m not in self.models:
            raise ValueError(f"no propensity model for cluster size {cluster.m}")
        return _check_positivity(self.models[cluster.m]._raw_probs(cluster.covariates, None), self.eta)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "eta": self.eta, "models": {str(k): v.to_dict() for k, v in self.models.items()}}


def model_from_dict(doc: dict) -> PropensityModel:
    kind = doc.get("kind", "fitted_logistic")
    eta = doc.get("eta", DEFAULT_ETA)
    if kind == "known_constant":
        return KnownConstant(doc["q"], eta)
    if kind == "known_table":
        return KnownTable(eta)
    if kind == "fitted_logistic":
        return FittedLogistic(doc["intercept"], doc["slopes"], eta)
    if kind == "stratified_logistic":
        return StratifiedLogistic({int(k): model_from_dict(v) for k, v in doc["models"].items()}, eta)
    raise ValueError(f"unknown propensity model kind {kind!r}")


def save_model(model: PropensityModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(model.to_dict(), indent=2) + "\n", encoding="utf-8")


def individual_propensity(model: PropensityModel, cluster: Cluster, j: int, a: int) -> float:
    """``e_j(a | X_i)`` for unit ``j`` of ``cluster``."""
    if not 0 <= j < cluster.m:
        raise IndexError(f"unit index {j} out of range for cluster of size {cluster.m}")
    if a not in (0, 1):
        raise ValueError("a must be 0 or 1")
    e1 = float(model.cluster_probs(cluster)[j])
    return e1 if a == 1 else 1.0 - e1


def cluster_propensity(model: PropensityModel, cluster: Cluster, a) -> float:
    """Joint probability of treatment vector ``a`` under the factored model."""
    a = np.asarray(a)
    if a.shape != (cluster.m,):
        raise ValueError(f"treatment vector must have length {cluster.m}")
    e1 = model.cluster_probs(cluster)
    return float(np.prod(np.where(a == 1, e1, 1.0 - e1)))


@dataclass(frozen=True)
class PropensityFitConfig:
    max_iter: int = 50
    tol: float = 1e-10
    eta: float = DEFAULT_ETA
    by_cluster_size: bool = False


def _logistic_newton(x: np.ndarray, a: np.ndarray, cfg: PropensityFitConfig) -> FittedLogistic:
    if a.min() == a.max():
        raise PropensityFitError(f"complete separation: every unit has A={int(a[0])} (0 iterations)")
    design = np.column_stack([np.ones(x.shape[0]), x])
    beta = np.zeros(design.shape[1])
    beta[0] = np.log(a.mean() / (1 - a.mean()))
    for it in range(1, cfg.max_iter + 1):
        prob = expit(design @ beta)
        w = prob * (1 - prob)
        if w.min() < 1e-12:
            raise PropensityFitError(
                f"separation: fitted probabilities reached 0 or 1 after {it} iterations"
            )
        info = design.T @ (design * w[:, None])
        grad = design.T @ (a - prob)
        try:
            step = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            raise PropensityFitError(f"singular information matrix after {it} iterations") from None
        beta = beta + step
        if np.max(np.abs(step)) < cfg.tol * (1 + np.max(np.abs(beta))):
            prob = expit(design @ beta)
            info = design.T @ (design * (prob * (1 - prob))[:, None])
            return FittedLogistic(beta[0], beta[1:], cfg.eta, cov=np.linalg.inv(info), n_iter=it)
        if np.max(np.abs(beta)) > 50:
            raise PropensityFitError(f"separation: coefficients diverging after {it} iterations")
    raise PropensityFitError(f"logistic fit did not converge after {cfg.max_iter} iterations")


def fit_propensity(dataset: ClusterDataset, config: PropensityFitConfig | None = None) -> PropensityModel:
    """Maximum-likelihood logistic regression of ``A`` on unit covariates.

    Units are pooled across clusters; with ``by_cluster_size`` one model is fitted
    per cluster size.
    """
    cfg = config or PropensityFitConfig()
    a = dataset.a.astype(float)
    if not cfg.by_cluster_size:
        return _logistic_newton(dataset.x, a, cfg)
    sizes = np.repeat(dataset.sizes, dataset.sizes)
    models = {}
    for m in np.unique(sizes):
        mask = sizes == m
        models[int(m)] = _logistic_newton(dataset.x[mask], a[mask], cfg)
    return StratifiedLogistic(models, cfg.eta)


def propensity_error_metric(true_model: PropensityModel, fitted: PropensityModel, dataset: ClusterDataset) -> float:
    """Average over clusters of ``max_a |sum_j 1/e_j(a) - 1/ehat_j(a)|``."""
    e = true_model.unit_probs(dataset)
    ehat = fitted.unit_probs(dataset)
    gap1 = np.abs(dataset.cluster_sum(1.0 / e - 1.0 / ehat))
    gap0 = np.abs(dataset.cluster_sum(1.0 / (1.0 - e) - 1.0 / (1.0 - ehat)))
    return float(np.mean(np.maximum(gap0, gap1)))
