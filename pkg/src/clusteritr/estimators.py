"""Policy-value estimators for clustered data with within-cluster interference.

All estimators return a :class:`ValueEstimate` whose ``cluster_scores`` average
to the point estimate.  The additive estimator weights each cluster mean by
``1 + sum_j (1{A_ij = pi_ij} / e_j(pi_ij) - 1)``; the standard estimator uses the
product of the unit-level inverse propensities instead, and the polynomial
estimator interpolates between them by summing products over index subsets of
size at most ``beta``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

import numpy as np

from .data import Cluster, ClusterDataset, Policy, assign
from .propensity import PropensityModel


@dataclass(frozen=True, eq=False)
class ValueEstimate:
    value: float
    cluster_scores: np.ndarray = field(repr=False)
    se: float
    estimator: str

    @classmethod
    def from_scores(cls, scores: np.ndarray, estimator: str) -> "ValueEstimate":
        scores = np.asarray(scores, dtype=float)
        n = scores.size
        se = float(np.std(scores, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        return cls(float(np.mean(scores)), scores, se, estimator)

    @property
    def n(self) -> int:
        return int(self.cluster_scores.size)

    def to_dict(self) -> dict:
        return {"estimator": self.estimator, "value": self.value, "se": self.se, "n": self.n}

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _policy_terms(dataset: ClusterDataset, model: PropensityModel, bits: np.ndarray):
    """Per-unit ``e_j(1|X_i)`` and ``1{A_ij = b_ij} / e_j(b_ij | X_i)``."""
    e1 = model.unit_probs(dataset)
    e_pi = np.where(bits == 1, e1, 1.0 - e1)
    w = (dataset.a == bits) / e_pi
    return e1, w


def addipw_scores(dataset: ClusterDataset, model: PropensityModel, bits: np.ndarray) -> np.ndarray:
    _, w = _policy_terms(dataset, model, bits)
    ybar = dataset.cluster_mean(dataset.y)
    return ybar * (dataset.cluster_sum(w - 1.0) + 1.0)


def value_ipw_standard(dataset: ClusterDataset, model: PropensityModel, policy: Policy) -> ValueEstimate:
    bits = assign(policy, dataset)
    _, w = _policy_terms(dataset, model, bits)
    ybar = dataset.cluster_mean(dataset.y)
    return ValueEstimate.from_scores(ybar * np.multiply.reduceat(w, dataset.starts), "ipw")


def value_ipw_nointerference(dataset: ClusterDataset, model: PropensityModel, policy: Policy) -> ValueEstimate:
    bits = assign(policy, dataset)
    _, w = _policy_terms(dataset, model, bits)
    return ValueEstimate.from_scores(dataset.cluster_mean(w * dataset.y), "noint")


def value_addipw(dataset: ClusterDataset, model: PropensityModel, policy: Policy) -> ValueEstimate:
    return ValueEstimate.from_scores(addipw_scores(dataset, model, assign(policy, dataset)), "addipw")


def _padded(dataset: ClusterDataset, values: np.ndarray, fill: float = 0.0) -> np.ndarray:
    """Unit values as an ``(n, m_max)`` matrix, short clusters padded with ``fill``."""
    out = np.full((dataset.n, dataset.m_max), fill)
    pos = np.arange(dataset.n_units) - dataset.starts[dataset.cluster_index]
    out[dataset.cluster_index, pos] = values
    return out


def subset_product_sums(d: np.ndarray, beta: int) -> np.ndarray:
    """Row-wise ``sum_{|U| <= beta} prod_{l in U} d_l`` (empty product is 1).

    Computed with the elementary-symmetric-polynomial recursion, so the cost is
    ``O(m * beta)`` per row rather than the number of subsets.  Zero padding does
    not change the result.
    """
    d = np.atleast_2d(np.asarray(d, dtype=float))
    e = np.zeros((d.shape[0], beta + 1))
    e[:, 0] = 1.0
    for c in range(d.shape[1]):
        for k in range(min(beta, c + 1), 0, -1):
            e[:, k] += d[:, c] * e[:, k - 1]
    return e.sum(axis=1)


def value_polyipw(dataset: ClusterDataset, model: PropensityModel, policy: Policy, beta: int) -> ValueEstimate:
    """Estimator under the polynomial additive model with interactions up to order ``beta``."""
    if int(beta) != beta or beta < 1:
        raise ValueError(f"interaction order beta must be an integer >= 1, got {beta}")
    if beta > dataset.m_max:
        raise ValueError(f"beta={beta} exceeds the largest cluster size {dataset.m_max}")
    bits = assign(policy, dataset)
    _, w = _policy_terms(dataset, model, bits)
    weights = subset_product_sums(_padded(dataset, w - 1.0), int(beta))
    ybar = dataset.cluster_mean(dataset.y)
    return ValueEstimate.from_scores(ybar * weights, f"poly:{int(beta)}")


def value_with_cost(dataset: ClusterDataset, model: PropensityModel, policy: Policy, cost: float) -> ValueEstimate:
    """Additive estimate minus ``cost`` times each cluster's treated fraction."""
    if cost < 0:
        raise ValueError("cost must be non-negative")
    bits = assign(policy, dataset)
    scores = addipw_scores(dataset, model, bits) - cost * dataset.cluster_mean(bits)
    return ValueEstimate.from_scores(scores, f"addipw-cost:{cost:g}")


# ---------------------------------------------------------------------------
# Matrix form
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SigmaInverse:
    """Inverse of ``E[At At^T | X]`` for ``At = (1, A_1, ..., A_m)``."""

    m: int
    entries: np.ndarray


def sigma_inverse_from_probs(e1: np.ndarray) -> np.ndarray:
    e1 = np.asarray(e1, dtype=float)
    m = e1.size
    out = np.zeros((m + 1, m + 1))
    out[0, 0] = 1.0 + np.sum(e1 / (1.0 - e1))
    out[0, 1:] = out[1:, 0] = -1.0 / (1.0 - e1)
    out[np.arange(1, m + 1), np.arange(1, m + 1)] = 1.0 / (e1 * (1.0 - e1))
    return out


def sigma_inverse_closed_form(model: PropensityModel, cluster: Cluster) -> SigmaInverse:
    return SigmaInverse(cluster.m, sigma_inverse_from_probs(model.cluster_probs(cluster)))


def ghat_unit(model: PropensityModel, cluster: Cluster, j: int) -> np.ndarray:
    """Single-observation estimate of unit ``j``'s additive coefficient vector."""
    s = sigma_inverse_closed_form(model, cluster).entries
    at = np.concatenate(([1.0], cluster.treatments))
    return s @ at * cluster.outcomes[j]


def value_addipw_via_matrix(dataset: ClusterDataset, model: PropensityModel, policy: Policy) -> ValueEstimate:
    """Additive estimator computed as ``mean_j pi_t^T Sigma^{-1} A_t Y_ij`` cluster by cluster."""
    scores = np.empty(dataset.n)
    for i, c in enumerate(dataset.clusters):
        s = sigma_inverse_closed_form(model, c).entries
        pi_t = np.concatenate(([1.0], policy.decide(c.covariates)))
        at = np.concatenate(([1.0], c.treatments))
        scores[i] = np.mean([pi_t @ s @ at * y for y in c.outcomes])
    return ValueEstimate.from_scores(scores, "addipw-matrix")


def closed_form_quadratic(dataset: ClusterDataset, e1: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Per-cluster ``phi(A)^T Sigma^{-1} phi(b)`` with the closed-form inverse expanded."""
    a = dataset.a.astype(float)
    b = np.asarray(bits, dtype=float)
    term = e1 / (1 - e1) - (a + b) / (1 - e1) + a * b / (e1 * (1 - e1))
    return 1.0 + dataset.cluster_sum(term)


# ---------------------------------------------------------------------------
# Outcome-model nuisance and the doubly robust estimator
# ---------------------------------------------------------------------------


class NuisanceError(ValueError):
    pass


@dataclass(frozen=True)
class NuisanceConfig:
    """Options for :func:`fit_nuisance`.

    ``crossfit_folds >= 2`` fits the outcome model on out-of-fold clusters; the
    resulting fit can only score the dataset it was built from.
    """

    ridge: float = 1e-6
    crossfit_folds: int = 0
    seed: int = 0
    max_condition: float = 1e12


def _basis_blocks(dataset: ClusterDataset):
    """Unit covariates and leave-one-out cluster means of the others' covariates."""
    xs = np.add.reduceat(dataset.x, dataset.starts, axis=0)[dataset.cluster_index]
    m = dataset.sizes[dataset.cluster_index][:, None].astype(float)
    others = np.where(m > 1, (xs - dataset.x) / np.maximum(m - 1, 1), 0.0)
    return dataset.x, others


def _feature_count(p: int) -> int:
    return 3 * (1 + 2 * p)


def _design(dataset: ClusterDataset, bits: np.ndarray) -> np.ndarray:
    """Regression rows ``[f_j, b_j f_j, sum_{k!=j} b_k h_kj / (m-1)]``.

    ``f_j = (1, X_j, Xbar_-j)`` enters the baseline and own-treatment terms and
    ``h_kj = (1, X_k, X_j)`` the effect of unit ``k``'s treatment on unit ``j``.
    """
    x, others = _basis_blocks(dataset)
    n_units = dataset.n_units
    f = np.column_stack([np.ones(n_units), x, others])
    b = np.asarray(bits, dtype=float)
    m = dataset.sizes[dataset.cluster_index].astype(float)
    denom = np.where(m > 1, m - 1, 1.0)[:, None]
    tot_b = dataset.cluster_sum(b)[dataset.cluster_index] - b
    tot_bx = np.add.reduceat(b[:, None] * x, dataset.starts, axis=0)[dataset.cluster_index] - b[:, None] * x
    spill = np.column_stack([tot_b, tot_bx, tot_b[:, None] * x]) / denom
    return np.column_stack([f, b[:, None] * f, spill])


@dataclass(frozen=True, eq=False)
class NuisanceFit:
    """Per-cluster-size linear-basis estimate of the additive outcome model.

    ``coef[m]`` holds the basis coefficients for clusters of size ``m``; the
    matrix ``G(x)`` of a cluster is recovered by :meth:`g_matrix`.  Propensities
    for the weighting term are supplied to :func:`value_dr` separately.
    """

    p: int
    coef: dict
    fold_fits: tuple | None = None
    fold_of_cluster: np.ndarray | None = None

    def covers(self, sizes) -> bool:
        return all(int(m) in self.coef for m in np.unique(sizes))

    def predict(self, dataset: ClusterDataset, bits: np.ndarray) -> np.ndarray:
        """``G(X_i) phi(b_i)`` for every unit (flat array)."""
        if dataset.p != self.p:
            raise NuisanceError(f"nuisance fitted with p={self.p}, data has p={dataset.p}")
        missing = sorted(set(int(m) for m in np.unique(dataset.sizes)) - set(self.coef))
        if missing:
            raise NuisanceError(f"no outcome model for cluster size(s) {missing}")
        design = _design(dataset, bits)
        theta = np.vstack([self.coef[int(m)] for m in dataset.sizes[dataset.cluster_index]])
        return np.einsum("ij,ij->i", design, theta)

    def g_matrix(self, cluster: Cluster) -> np.ndarray:
        """Explicit ``m x (m+1)`` coefficient matrix for one cluster."""
        ds = ClusterDataset.from_clusters([cluster])
        m = cluster.m
        base = self.predict(ds, np.zeros(m, dtype=np.int8))
        g = np.empty((m, m + 1))
        g[:, 0] = base
        for k in range(m):
            e = np.zeros(m, dtype=np.int8)
            e[k] = 1
            g[:, k + 1] = self.predict(ds, e) - base
        return g

    @classmethod
    def zero(cls, p: int, sizes) -> "NuisanceFit":
        return cls(p, {int(m): np.zeros(_feature_count(p)) for m in np.unique(sizes)})

    @classmethod
    def from_blocks(cls, p: int, sizes, baseline, own, spill) -> "NuisanceFit":
        """Build a fit from known coefficients.

        ``baseline`` and ``own`` have length ``1 + 2p`` over ``(1, X_j, Xbar_-j)``;
        ``spill`` has length ``1 + 2p`` over ``(1, X_k, X_j)``.
        """
        theta = np.concatenate([baseline, own, spill]).astype(float)
        if theta.size != _feature_count(p):
            raise ValueError("coefficient blocks must each have length 1 + 2p")
        return cls(p, {int(m): theta.copy() for m in np.unique(sizes)})


def _solve_stratum(design: np.ndarray, y: np.ndarray, cfg: NuisanceConfig, m: int) -> np.ndarray:
    live = np.abs(design).max(axis=0) > 0
    d = design[:, live]
    gram = d.T @ d
    if cfg.ridge == 0:
        if np.linalg.matrix_rank(d) < d.shape[1]:
            raise NuisanceError(f"collinear design for cluster size {m} and ridge=0")
    else:
        gram = gram + cfg.ridge * np.eye(d.shape[1])
    if np.linalg.cond(gram) > cfg.max_condition:
        raise NuisanceError(f"design for cluster size {m} is singular beyond ridge={cfg.ridge}")
    theta = np.zeros(design.shape[1])
    theta[live] = np.linalg.solve(gram, d.T @ y)
    return theta


def _fit_once(dataset: ClusterDataset, cfg: NuisanceConfig) -> dict:
    design = _design(dataset, dataset.a)
    unit_size = dataset.sizes[dataset.cluster_index]
    coef = {}
    for m in np.unique(dataset.sizes):
        n_clusters = int(np.sum(dataset.sizes == m))
        if n_clusters < m + 2:
            raise NuisanceError(
                f"cluster size {int(m)} has {n_clusters} clusters; at least {int(m) + 2} needed"
            )
        rows = unit_size == m
        coef[int(m)] = _solve_stratum(design[rows], dataset.y[rows], cfg, int(m))
    return coef


def fit_nuisance(dataset: ClusterDataset, model: PropensityModel | None = None, config: NuisanceConfig | None = None) -> NuisanceFit:
    """Ridge least-squares fit of the additive outcome model, one fit per cluster size.

    ``model`` is accepted for interface symmetry; the weighting matrix is always
    rebuilt from the propensity model passed to :func:`value_dr`.
    """
    cfg = config or NuisanceConfig()
    if cfg.crossfit_folds < 2:
        return NuisanceFit(dataset.p, _fit_once(dataset, cfg))
    rng = np.random.default_rng(cfg.seed)
    fold_of = rng.permutation(np.arange(dataset.n) % cfg.crossfit_folds)
    fits = []
    for k in range(cfg.crossfit_folds):
        train = np.flatnonzero(fold_of != k)
        fits.append(NuisanceFit(dataset.p, _fit_once(dataset.subset(train), cfg)))
    merged = {m: np.mean([f.coef[m] for f in fits if m in f.coef], axis=0) for m in {m for f in fits for m in f.coef}}
    return NuisanceFit(dataset.p, merged, tuple(fits), fold_of)


def value_dr(dataset: ClusterDataset, model: PropensityModel, policy: Policy, nuisance: NuisanceFit) -> ValueEstimate:
    """Doubly robust estimator: outcome-model prediction plus weighted residual correction."""
    bits = assign(policy, dataset)
    e1 = model.unit_probs(dataset)
    weight = closed_form_quadratic(dataset, e1, bits)
    if nuisance.fold_of_cluster is None:
        pred_pi = nuisance.predict(dataset, bits)
        pred_a = nuisance.predict(dataset, dataset.a)
    else:
        if nuisance.fold_of_cluster.size != dataset.n:
            raise NuisanceError("cross-fitted nuisance can only score the dataset it was fitted on")
        pred_pi = np.empty(dataset.n_units)
        pred_a = np.empty(dataset.n_units)
        for k, fit in enumerate(nuisance.fold_fits):
            idx = np.flatnonzero(nuisance.fold_of_cluster == k)
            units = dataset.unit_slice(idx)
            part = dataset.subset(idx)
            pred_pi[units] = fit.predict(part, bits[units])
            pred_a[units] = fit.predict(part, part.a)
    resid = dataset.cluster_mean(dataset.y - pred_a)
    scores = dataset.cluster_mean(pred_pi) + weight * resid
    return ValueEstimate.from_scores(scores, "dr")


# ---------------------------------------------------------------------------
# Tag dispatch
# ---------------------------------------------------------------------------

ESTIMATOR_TAGS = ("ipw", "noint", "addipw", "poly:<beta>", "dr", "addipw-cost:<c>")

_TAG = re.compile(r"^(ipw|noint|addipw|dr)$|^poly:(\d+)$|^addipw-cost:([0-9.eE+-]+)$")


def parse_estimator(tag: str) -> tuple[str, float | None]:
    """Split an estimator tag into ``(name, parameter)``."""
    mt = _TAG.match(tag.strip())
    if not mt:
        raise ValueError(f"unknown estimator {tag!r}; expected one of {', '.join(ESTIMATOR_TAGS)}")
    if mt.group(1):
        return mt.group(1), None
    if mt.group(2):
        return "poly", int(mt.group(2))
    return "addipw-cost", float(mt.group(3))


def evaluate(tag: str, dataset: ClusterDataset, model: PropensityModel, policy: Policy,
             nuisance: NuisanceFit | None = None) -> ValueEstimate:
    name, arg = parse_estimator(tag)
    if name == "ipw":
        return value_ipw_standard(dataset, model, policy)
    if name == "noint":
        return value_ipw_nointerference(dataset, model, policy)
    if name == "addipw":
        return value_addipw(dataset, model, policy)
    if name == "poly":
        return value_polyipw(dataset, model, policy, int(arg))
    if name == "addipw-cost":
        return value_with_cost(dataset, model, policy, arg)
    if nuisance is None:
        nuisance = fit_nuisance(dataset, model)
    return value_dr(dataset, model, policy, nuisance)
