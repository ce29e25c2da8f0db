"""Clustered data model, policies, and CSV ingestion.

A :class:`ClusterDataset` stores every unit in flat arrays ordered cluster by
cluster, with ``sizes`` giving the cluster boundaries.  Estimators work on the
flat arrays directly; :attr:`ClusterDataset.clusters` gives per-cluster views
for code that wants them.
"""
from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class DatasetError(ValueError):
    """Base class for malformed dataset input."""


class EmptyDatasetError(DatasetError):
    pass


class MissingColumnError(DatasetError):
    pass


class InvalidTreatmentError(DatasetError):
    pass


class RaggedRowError(DatasetError):
    pass


class MissingValueError(DatasetError):
    pass


class DimensionMismatchError(ValueError):
    """Covariate dimension does not match what a policy or model expects."""


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Cluster:
    """One cluster: outcomes, treatments and covariates of its ``m`` units."""

    id: str
    outcomes: np.ndarray
    treatments: np.ndarray
    covariates: np.ndarray
    propensity: np.ndarray | None = None

    def __post_init__(self):
        y = np.asarray(self.outcomes, dtype=float)
        a = np.asarray(self.treatments)
        x = np.asarray(self.covariates, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        m = y.shape[0]
        if m < 1:
            raise DatasetError(f"cluster {self.id!r} has no units")
        if a.shape != (m,) or x.ndim != 2 or x.shape[0] != m:
            raise DatasetError(
                f"cluster {self.id!r}: outcomes, treatments and covariates must share leading dimension {m}"
            )
        if not np.isin(a, (0, 1)).all():
            raise InvalidTreatmentError(f"cluster {self.id!r}: treatments must be 0 or 1")
        object.__setattr__(self, "outcomes", _frozen(y))
        object.__setattr__(self, "treatments", _frozen(a.astype(np.int8)))
        object.__setattr__(self, "covariates", _frozen(x))
        if self.propensity is not None:
            e = np.asarray(self.propensity, dtype=float)
            if e.shape != (m,):
                raise DatasetError(f"cluster {self.id!r}: propensity must have length {m}")
            object.__setattr__(self, "propensity", _frozen(e))

    @property
    def m(self) -> int:
        return int(self.outcomes.shape[0])


@dataclass(frozen=True, eq=False)
class ClusterDataset:
    """Immutable collection of clusters stored as flat unit-level arrays.

    Parameters
    ----------
    y : array of shape (N,)
        Unit outcomes, clusters laid out contiguously.
    a : array of shape (N,)
        Binary treatments.
    x : array of shape (N, p)
        Unit covariates.
    sizes : array of shape (n,)
        Number of units in each cluster, in cluster order.
    propensity : array of shape (N,), optional
        Known per-unit treatment probabilities ``P(A_ij = 1 | X_i)``.
    cluster_ids : sequence of str, optional
        Labels for the clusters; defaults to ``"0", "1", ...``.
    """

    y: np.ndarray
    a: np.ndarray
    x: np.ndarray
    sizes: np.ndarray
    propensity: np.ndarray | None = None
    cluster_ids: tuple[str, ...] | None = None
    starts: np.ndarray = field(init=False, repr=False)
    cluster_index: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.int64)
        if sizes.ndim != 1 or sizes.size == 0:
            raise EmptyDatasetError("dataset has no clusters")
        if (sizes < 1).any():
            raise DatasetError("every cluster needs at least one unit")
        n_units = int(sizes.sum())
        y = np.asarray(self.y, dtype=float)
        a = np.asarray(self.a)
        x = np.asarray(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        if y.shape != (n_units,) or a.shape != (n_units,) or x.ndim != 2 or x.shape[0] != n_units:
            raise DatasetError(f"unit arrays must have leading dimension {n_units} (sum of cluster sizes)")
        if not np.isin(a, (0, 1)).all():
            raise InvalidTreatmentError("treatments must be 0 or 1")
        if not (np.isfinite(y).all() and np.isfinite(x).all()):
            raise MissingValueError("outcomes and covariates must be finite")
        object.__setattr__(self, "y", _frozen(y))
        object.__setattr__(self, "a", _frozen(a.astype(np.int8)))
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "sizes", _frozen(sizes))
        if self.propensity is not None:
            e = np.asarray(self.propensity, dtype=float)
            if e.shape != (n_units,):
                raise DatasetError("propensity must have one entry per unit")
            object.__setattr__(self, "propensity", _frozen(e))
        if self.cluster_ids is None:
            ids = tuple(str(i) for i in range(sizes.size))
        else:
            ids = tuple(str(c) for c in self.cluster_ids)
            if len(ids) != sizes.size:
                raise DatasetError("cluster_ids must have one label per cluster")
        object.__setattr__(self, "cluster_ids", ids)
        starts = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        object.__setattr__(self, "starts", _frozen(starts))
        object.__setattr__(self, "cluster_index", _frozen(np.repeat(np.arange(sizes.size), sizes)))

    @classmethod
    def from_clusters(cls, clusters: Sequence[Cluster]) -> "ClusterDataset":
        if len(clusters) == 0:
            raise EmptyDatasetError("dataset has no clusters")
        p = clusters[0].covariates.shape[1]
        for c in clusters:
            if c.covariates.shape[1] != p:
                raise DimensionMismatchError(
                    f"cluster {c.id!r} has {c.covariates.shape[1]} covariates, expected {p}"
                )
        with_e = [c.propensity is not None for c in clusters]
        if any(with_e) and not all(with_e):
            raise DatasetError("propensity must be given for all clusters or none")
        return cls(
            y=np.concatenate([c.outcomes for c in clusters]),
            a=np.concatenate([c.treatments for c in clusters]),
            x=np.vstack([c.covariates for c in clusters]),
            sizes=np.array([c.m for c in clusters]),
            propensity=np.concatenate([c.propensity for c in clusters]) if all(with_e) else None,
            cluster_ids=tuple(c.id for c in clusters),
        )

    @property
    def n(self) -> int:
        """Number of clusters."""
        return int(self.sizes.size)

    @property
    def n_units(self) -> int:
        return int(self.y.size)

    @property
    def p(self) -> int:
        return int(self.x.shape[1])

    @property
    def m_max(self) -> int:
        return int(self.sizes.max())

    def cluster(self, i: int) -> Cluster:
        lo = int(self.starts[i])
        hi = lo + int(self.sizes[i])
        return Cluster(
            id=self.cluster_ids[i],
            outcomes=self.y[lo:hi],
            treatments=self.a[lo:hi],
            covariates=self.x[lo:hi],
            propensity=None if self.propensity is None else self.propensity[lo:hi],
        )

    @property
    def clusters(self) -> list[Cluster]:
        return [self.cluster(i) for i in range(self.n)]

    def cluster_sum(self, values: np.ndarray) -> np.ndarray:
        """Sum a unit-level array within clusters (fixed summation order)."""
        return np.add.reduceat(np.asarray(values, dtype=float), self.starts)

    def cluster_mean(self, values: np.ndarray) -> np.ndarray:
        return self.cluster_sum(values) / self.sizes

    def unit_slice(self, cluster_indices: Iterable[int]) -> np.ndarray:
        """Unit positions belonging to the given clusters, in the given order."""
        idx = np.asarray(list(cluster_indices), dtype=np.int64)
        if idx.size == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([np.arange(self.starts[i], self.starts[i] + self.sizes[i]) for i in idx])

    def subset(self, cluster_indices: Iterable[int]) -> "ClusterDataset":
        """New dataset holding the selected clusters, in the order given."""
        idx = np.asarray(list(cluster_indices), dtype=np.int64)
        if idx.size == 0:
            raise EmptyDatasetError("subset selects no clusters")
        units = self.unit_slice(idx)
        return ClusterDataset(
            y=self.y[units],
            a=self.a[units],
            x=self.x[units],
            sizes=self.sizes[idx],
            propensity=None if self.propensity is None else self.propensity[units],
            cluster_ids=tuple(self.cluster_ids[i] for i in idx),
        )

    def with_outcomes(self, y: np.ndarray) -> "ClusterDataset":
        return ClusterDataset(y, self.a, self.x, self.sizes, self.propensity, self.cluster_ids)

    def with_treatments(self, a: np.ndarray) -> "ClusterDataset":
        return ClusterDataset(self.y, a, self.x, self.sizes, self.propensity, self.cluster_ids)

    def with_covariates(self, x: np.ndarray) -> "ClusterDataset":
        return ClusterDataset(self.y, self.a, x, self.sizes, self.propensity, self.cluster_ids)


# ---------------------------------------------------------------------------
# Policies
# ---------------------------------------------------------------------------


class Policy:
    """Deterministic map from a unit's covariate vector to a treatment bit."""

    kind: str = ""

    def decide(self, x: np.ndarray) -> np.ndarray:
        """Treatment bits for a ``(k, p)`` covariate matrix (or a single row)."""
        raise NotImplementedError

    def _params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self._params()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.decide(x)


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x.reshape(1, -1) if x.ndim == 1 else x


@dataclass(frozen=True, eq=False)
class LinearPolicy(Policy):
    """Treat when ``coef[0] + z @ coef[1:] >= 0`` with ``z = (x - center) / scale``.

    Exact zeros on the boundary are treated.  ``center`` and ``scale`` hold the
    covariate standardisation used while learning; both default to identity.
    """

    coef: np.ndarray
    center: np.ndarray | None = None
    scale: np.ndarray | None = None
    kind = "linear_threshold"

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float).ravel()
        if coef.size < 1:
            raise ValueError("linear policy needs at least an intercept")
        object.__setattr__(self, "coef", _frozen(coef))
        p = coef.size - 1
        for name in ("center", "scale"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float).ravel()
                if v.size != p:
                    raise DimensionMismatchError(f"{name} has length {v.size}, expected {p}")
                object.__setattr__(self, name, _frozen(v))
        if self.scale is not None and (self.scale <= 0).any():
            raise ValueError("scale entries must be positive")

    @property
    def p(self) -> int:
        return self.coef.size - 1

    def score(self, x: np.ndarray) -> np.ndarray:
        x = _as_matrix(x)
        if x.shape[1] != self.p:
            raise DimensionMismatchError(f"policy expects {self.p} covariates, got {x.shape[1]}")
        if self.center is not None:
            x = x - self.center
        if self.scale is not None:
            x = x / self.scale
        return self.coef[0] + x @ self.coef[1:]

    def decide(self, x: np.ndarray) -> np.ndarray:
        return (self.score(x) >= 0).astype(np.int8)

    def raw_coefficients(self) -> np.ndarray:
        """Intercept and slopes on the original (unstandardised) covariate scale."""
        slopes = self.coef[1:].copy()
        intercept = self.coef[0]
        if self.scale is not None:
            slopes = slopes / self.scale
        if self.center is not None:
            intercept = intercept - self.center @ slopes
        return np.concatenate(([intercept], slopes))

    def _params(self) -> dict:
        out = {"coef": self.coef.tolist()}
        if self.center is not None:
            out["center"] = self.center.tolist()
        if self.scale is not None:
            out["scale"] = self.scale.tolist()
        return out


@dataclass(frozen=True, eq=False)
class TreePolicy(Policy):
    """Depth-2 decision tree.

    ``features`` and ``thresholds`` hold the root split followed by the left and
    right child splits; a unit goes right when ``x[f] > t``.  ``leaves`` gives the
    treatment bit of the four leaves, ordered left-left, left-right,
    right-left, right-right.
    """

    features: tuple[int, int, int]
    thresholds: tuple[float, float, float]
    leaves: tuple[int, int, int, int]
    kind = "tree_depth2"

    def __post_init__(self):
        f = tuple(int(v) for v in self.features)
        t = tuple(float(v) for v in self.thresholds)
        lv = tuple(int(v) for v in self.leaves)
        if len(f) != 3 or len(t) != 3 or len(lv) != 4:
            raise ValueError("depth-2 tree needs 3 splits and 4 leaves")
        if min(f) < 0:
            raise ValueError("feature indices must be non-negative")
        if not set(lv) <= {0, 1}:
            raise ValueError("leaves must be 0 or 1")
        object.__setattr__(self, "features", f)
        object.__setattr__(self, "thresholds", t)
        object.__setattr__(self, "leaves", lv)

    @classmethod
    def conjunction(cls, f1: int, t1: float, f2: int, t2: float) -> "TreePolicy":
        """Treat iff ``x[f1] > t1`` and ``x[f2] > t2``."""
        return cls((f1, f2, f2), (t1, t2, t2), (0, 0, 0, 1))

    def decide(self, x: np.ndarray) -> np.ndarray:
        x = _as_matrix(x)
        if x.shape[1] <= max(self.features):
            raise DimensionMismatchError(
                f"tree splits on feature {max(self.features)} but x has {x.shape[1]} columns"
            )
        f0, f1, f2 = self.features
        t0, t1, t2 = self.thresholds
        right = x[:, f0] > t0
        child = np.where(right, x[:, f2] > t2, x[:, f1] > t1)
        leaf = 2 * right.astype(int) + child.astype(int)
        return np.asarray(self.leaves, dtype=np.int8)[leaf]

    def _params(self) -> dict:
        return {
            "features": list(self.features),
            "thresholds": list(self.thresholds),
            "leaves": list(self.leaves),
        }


@dataclass(frozen=True, eq=False)
class ConstantPolicy(Policy):
    bit: int
    kind = "constant"

    def __post_init__(self):
        if self.bit not in (0, 1):
            raise ValueError("constant policy bit must be 0 or 1")

    def decide(self, x: np.ndarray) -> np.ndarray:
        return np.full(_as_matrix(x).shape[0], self.bit, dtype=np.int8)

    def _params(self) -> dict:
        return {"bit": self.bit}


def policy_from_dict(doc: dict) -> Policy:
    kind = doc.get("kind")
    params = doc.get("params", {})
    if kind == LinearPolicy.kind:
        return LinearPolicy(params["coef"], params.get("center"), params.get("scale"))
    if kind == TreePolicy.kind:
        return TreePolicy(params["features"], params["thresholds"], params["leaves"])
    if kind == ConstantPolicy.kind:
        return ConstantPolicy(int(params["bit"]))
    raise ValueError(f"unknown policy kind {kind!r}")


def load_policy(path: str | Path) -> Policy:
    with open(path, encoding="utf-8") as fh:
        return policy_from_dict(json.load(fh))


def save_policy(policy: Policy, path: str | Path) -> None:
    Path(path).write_text(policy.to_json() + "\n", encoding="utf-8")


@dataclass(frozen=True)
class PolicyAssignment:
    """A policy applied unit-wise within one cluster."""

    bits: np.ndarray

    @property
    def with_intercept(self) -> np.ndarray:
        return np.concatenate(([1], self.bits)).astype(np.int8)


def policy_assignment(policy: Policy, cluster: Cluster) -> PolicyAssignment:
    return PolicyAssignment(bits=_frozen(policy.decide(cluster.covariates)))


def assign(policy: Policy, dataset: ClusterDataset) -> np.ndarray:
    """Treatment bits of ``policy`` for every unit of ``dataset`` (flat)."""
    return policy.decide(dataset.x)


def treated_fraction(dataset: ClusterDataset, bits: np.ndarray) -> np.ndarray:
    """Within-cluster treated fraction for each cluster."""
    return dataset.cluster_mean(bits)


# ---------------------------------------------------------------------------
# CSV ingestion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CsvSchema:
    """Column mapping for :func:`load_dataset`.

    ``covariates=None`` picks every column named ``X<k>`` in numeric order.
    ``propensity=None`` disables the known-propensity column; the default
    ``"e1"`` is used only when present in the header.
    """

    cluster: str = "cluster_id"
    unit: str = "unit_id"
    outcome: str = "Y"
    treatment: str = "A"
    covariates: tuple[str, ...] | None = None
    propensity: str | None = "e1"


_XCOL = re.compile(r"^X(\d+)$")


def _parse_float(text: str, row: int, col: str) -> float:
    if text.strip() == "":
        raise MissingValueError(f"row {row}: missing value in column {col!r}")
    try:
        v = float(text)
    except ValueError:
        raise DatasetError(f"row {row}: column {col!r} is not numeric: {text!r}") from None
    if not np.isfinite(v):
        raise MissingValueError(f"row {row}: non-finite value in column {col!r}")
    return v


def load_dataset(path: str | Path, schema: CsvSchema | None = None) -> ClusterDataset:
    """Read a unit-level CSV into a :class:`ClusterDataset`.

    Rows are grouped by cluster id; clusters appear in order of first
    occurrence and units keep file order within their cluster.  Error messages
    count data rows from 1 (the header is not a row).
    """
    schema = schema or CsvSchema()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDatasetError(f"{path}: file is empty") from None
        rows = list(reader)
    if schema.covariates is None:
        xcols = sorted((h for h in header if _XCOL.match(h)), key=lambda h: int(_XCOL.match(h).group(1)))
    else:
        xcols = list(schema.covariates)
    required = [schema.cluster, schema.unit, schema.outcome, schema.treatment, *xcols]
    missing = [c for c in required if c not in header]
    if missing:
        raise MissingColumnError(f"{path}: missing column(s) {missing}")
    if not xcols:
        raise MissingColumnError(f"{path}: no covariate columns (expected X1..Xp)")
    ecol = schema.propensity if schema.propensity in header else None
    pos = {h: k for k, h in enumerate(header)}

    groups: dict[str, list[tuple[float, int, list[float], float | None]]] = {}
    n_rows = 0
    for r, raw in enumerate(rows, start=1):
        if not raw or all(v.strip() == "" for v in raw):
            continue
        n_rows += 1
        if len(raw) != len(header):
            raise RaggedRowError(f"row {r}: expected {len(header)} fields, found {len(raw)}")
        cid = raw[pos[schema.cluster]].strip()
        if cid == "":
            raise MissingValueError(f"row {r}: missing cluster id")
        y = _parse_float(raw[pos[schema.outcome]], r, schema.outcome)
        a_text = raw[pos[schema.treatment]].strip()
        if a_text not in ("0", "1", "0.0", "1.0"):
            raise InvalidTreatmentError(f"row {r}: treatment must be 0 or 1, found {a_text!r}")
        x = [_parse_float(raw[pos[c]], r, c) for c in xcols]
        e = _parse_float(raw[pos[ecol]], r, ecol) if ecol else None
        groups.setdefault(cid, []).append((y, int(float(a_text)), x, e))
    if n_rows == 0:
        raise EmptyDatasetError(f"{path}: no data rows")

    units = [u for g in groups.values() for u in g]
    return ClusterDataset(
        y=np.array([u[0] for u in units]),
        a=np.array([u[1] for u in units]),
        x=np.array([u[2] for u in units]),
        sizes=np.array([len(g) for g in groups.values()]),
        propensity=np.array([u[3] for u in units]) if ecol else None,
        cluster_ids=tuple(groups),
    )


def save_dataset(dataset: ClusterDataset, path: str | Path, unit_ids: Sequence[str] | None = None) -> None:
    """Write ``dataset`` in the CSV layout read by :func:`load_dataset`.

    Floats use ``repr`` so a save/load round trip is exact.
    """
    header = ["cluster_id", "unit_id", "Y", "A"] + [f"X{k + 1}" for k in range(dataset.p)]
    if dataset.propensity is not None:
        header.append("e1")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n):
            lo = int(dataset.starts[i])
            for j in range(int(dataset.sizes[i])):
                u = lo + j
                uid = unit_ids[u] if unit_ids is not None else str(j + 1)
                row = [dataset.cluster_ids[i], uid, repr(float(dataset.y[u])), str(int(dataset.a[u]))]
                row += [repr(float(v)) for v in dataset.x[u]]
                if dataset.propensity is not None:
                    row.append(repr(float(dataset.propensity[u])))
                w.writerow(row)
