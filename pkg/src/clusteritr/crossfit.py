"""K-fold cross-fitted evaluation of learned policies with a per-unit treatment cost.

For each fold ``k`` a policy is learned on the other folds and scored on fold
``k`` with the cost-penalised additive IPW score

    Ybar_i [sum_j (1{A_ij = pi(X_ij)} / e_j(pi(X_ij)) - 1) + 1] - C * (treated share of cluster i).

Fold scores are pooled with weight ``1/n`` per cluster.  The cost enters both
the learning objective and the evaluation.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ._parallel import map_ordered
from .data import ClusterDataset, assign
from .estimators import value_with_cost
from .learning import LearnSpec, LearnedPolicy, learn
from .propensity import PropensityModel


class CrossfitError(RuntimeError):
    def __init__(self, message: str, fold: int | None = None):
        super().__init__(message)
        self.fold = fold


@dataclass(frozen=True)
class CrossfitSpec:
    K: int = 5
    cost_grid: tuple[float, ...] = (0.15, 0.20, 0.25)
    learner: LearnSpec = field(default_factory=LearnSpec)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "cost_grid", tuple(float(c) for c in self.cost_grid))
        if self.K < 2:
            raise ValueError("K must be >= 2")
        if any(c < 0 for c in self.cost_grid):
            raise ValueError("costs must be non-negative")


def make_folds(n: int, K: int, seed: int) -> np.ndarray:
    """Balanced random fold label for each of ``n`` clusters."""
    if K > n:
        raise CrossfitError(f"cannot split {n} clusters into {K} non-empty folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % K
    return folds


def normalize_coefficients(raw: np.ndarray) -> tuple[np.ndarray, bool]:
    """Coefficients divided by ``|intercept|``; unchanged (flag False) when the intercept is 0."""
    raw = np.asarray(raw, dtype=float)
    if raw[0] == 0:
        return raw.copy(), False
    return raw / abs(raw[0]), True


@dataclass
class CrossfitRow:
    cost: float
    value: float
    treated: float
    fold_values: list[float]
    fold_treated: list[float]
    fold_sizes: list[int]
    fold_results: list[LearnedPolicy] = field(repr=False)

    def fold_coefficients(self) -> list[np.ndarray]:
        return [normalize_coefficients(r.policy.raw_coefficients())[0] for r in self.fold_results]

    def to_dict(self) -> dict:
        coefs = []
        for r in self.fold_results:
            c, ok = normalize_coefficients(r.policy.raw_coefficients())
            coefs.append({"coefficients": c.tolist(), "normalized": ok})
        return {"cost": self.cost, "value": self.value, "treated": self.treated, "fold_values": self.fold_values,
                "fold_treated": self.fold_treated, "fold_sizes": self.fold_sizes, "fold_coefficients": coefs}


@dataclass
class CrossfitResult:
    rows: list[CrossfitRow]
    folds: np.ndarray
    full_fits: dict = field(default_factory=dict)

    def row(self, cost: float) -> CrossfitRow:
        for r in self.rows:
            if np.isclose(r.cost, cost):
                return r
        raise KeyError(cost)

    def to_dict(self) -> dict:
        doc = {"rows": [r.to_dict() for r in self.rows], "folds": self.folds.tolist()}
        if self.full_fits:
            doc["full_data_coefficients"] = {
                str(c): normalize_coefficients(r.policy.raw_coefficients())[0].tolist()
                for c, r in self.full_fits.items()}
        return doc

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def to_csv(self, path: str | Path) -> None:
        """Value table: ``cost,value,treated``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["cost", "value", "treated"])
            for r in self.rows:
                w.writerow([r.cost, repr(r.value), repr(r.treated)])

    def coefficients_csv(self, path: str | Path) -> None:
        """Coefficient table: one line per (cost, fold), coefficients normalised by ``|intercept|``."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            rows = [(r.cost, k, c) for r in self.rows for k, c in enumerate(r.fold_coefficients())]
            p = len(rows[0][2]) - 1 if rows else 0
            w.writerow(["cost", "fold", "intercept"] + [f"X{j + 1}" for j in range(p)])
            for cost, k, c in rows:
                w.writerow([cost, k] + [repr(float(v)) for v in c])


def _fold_task(task):
    train, model, lspec, k = task
    try:
        return learn(train, model, lspec)
    except Exception as exc:  # noqa: BLE001 - re-raised with the fold index
        return CrossfitError(f"fold {k}: {type(exc).__name__}: {exc}", k)


def crossfit_evaluate(dataset: ClusterDataset, model: PropensityModel, spec: CrossfitSpec | None = None,
                      folds: np.ndarray | None = None, workers: int = 1, full_fit: bool = False) -> CrossfitResult:
    """Cross-fitted, cost-penalised value of the policies produced by ``spec.learner``.

    ``folds`` overrides the seeded cluster-level split.  With ``full_fit`` a
    policy is also learned on all clusters for each cost (coefficients only).
    """
    spec = spec or CrossfitSpec()
    n = dataset.n
    folds = make_folds(n, spec.K, spec.seed) if folds is None else np.asarray(folds, dtype=np.int64)
    if folds.shape != (n,):
        raise CrossfitError("folds must label every cluster")
    labels = np.unique(folds)
    for k in range(spec.K):
        if k not in labels:
            raise CrossfitError(f"fold {k} has no clusters", k)
    members = [np.flatnonzero(folds == k) for k in range(spec.K)]
    train_sets = [dataset.subset(np.flatnonzero(folds != k)) for k in range(spec.K)]
    test_sets = [dataset.subset(idx) for idx in members]
    tasks = [(train_sets[k], model, replace(spec.learner, cost=c), k) for c in spec.cost_grid for k in range(spec.K)]
    if full_fit:
        tasks += [(dataset, model, replace(spec.learner, cost=c), -1) for c in spec.cost_grid]
    results = map_ordered(_fold_task, tasks, workers)
    for r in results:
        if isinstance(r, CrossfitError):
            raise r
    rows = []
    for ci, cost in enumerate(spec.cost_grid):
        fits = results[ci * spec.K:(ci + 1) * spec.K]
        fold_values, fold_treated, total, treated = [], [], 0.0, 0.0
        for k, fit in enumerate(fits):
            est = value_with_cost(test_sets[k], model, fit.policy, cost)
            frac = test_sets[k].cluster_mean(assign(fit.policy, test_sets[k]))
            fold_values.append(est.value)
            fold_treated.append(float(frac.mean()))
            total += float(est.cluster_scores.sum())
            treated += float(frac.sum())
        rows.append(CrossfitRow(cost, total / n, treated / n, fold_values, fold_treated,
                                [int(m.size) for m in members], list(fits)))
    full = {}
    if full_fit:
        full = dict(zip(spec.cost_grid, results[len(spec.cost_grid) * spec.K:]))
    return CrossfitResult(rows, folds, full)
