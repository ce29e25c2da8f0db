"""Learning linear treatment rules ``1(g0 + x @ g >= 0)``.

Two optimisers share one objective abstraction (:class:`PolicyObjective`):

* :func:`learn_linear_exact` enumerates every labelling of the training units
  that a linear rule can produce and scores each one.  For the additive and
  no-interference objectives this solves the same problem as the big-M
  mixed-integer program

      max_{g in B, p_ij in {0,1}}  (1/n) sum_i Ybar_i sum_j (A_ij/e_j(1) - (1-A_ij)/e_j(0)) p_ij
      s.t.  x_ij @ g / C_ij < p_ij <= 1 + x_ij @ g / C_ij,   C_ij > sup_{g in B} |x_ij @ g|,

  which is the route to take with a MILP solver once enumeration is too large.
* :func:`learn_linear_surrogate` replaces the indicator with a logistic
  sigmoid, anneals its temperature, and maximises with L-BFGS-B from several
  seeded random starts.

Covariates are standardised before learning and the standardisation is stored
on the returned :class:`~clusteritr.data.LinearPolicy`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from itertools import combinations

import numpy as np
from scipy.optimize import linprog, minimize
from scipy.special import expit, log_expit

from .data import ClusterDataset, LinearPolicy, assign
from .estimators import _padded, evaluate, subset_product_sums, value_with_cost
from .propensity import PropensityModel


class LearningError(RuntimeError):
    pass


class EnumerationTooLarge(LearningError):
    """Raised by the exact learner when the candidate count exceeds its guard."""


# ---------------------------------------------------------------------------
# Objectives
# ---------------------------------------------------------------------------


def _parse_objective(tag: str, cost: float) -> tuple[str, int | None, float]:
    tag = tag.strip()
    if tag.startswith("addipw-cost:"):
        return "addipw", None, cost + float(tag.split(":", 1)[1])
    if tag in ("addipw", "noint", "ipw"):
        return tag, None, cost
    if tag.startswith("poly:"):
        return "poly", int(tag.split(":", 1)[1]), cost
    raise ValueError(f"objective {tag!r} is not supported for learning (use addipw, noint, ipw or poly:<beta>)")


class PolicyObjective:
    """Empirical policy value (minus a treatment-cost penalty) as a function of unit labels.

    ``values`` scores a batch of hard labellings; ``smooth`` scores soft labels
    ``sigmoid(z / tau)`` and returns the gradient with respect to ``z``.
    """

    def __init__(self, dataset: ClusterDataset, model: PropensityModel, objective: str = "addipw", cost: float = 0.0):
        if cost < 0:
            raise ValueError("cost must be non-negative")
        self.dataset = dataset
        self.kind, self.beta, self.cost = _parse_objective(objective, cost)
        self.tag = objective
        ds = dataset
        self.n = ds.n
        e1 = model.unit_probs(ds)
        self.e1 = e1
        a = ds.a.astype(float)
        self.ybar = ds.cluster_mean(ds.y)
        self.unit_m = ds.sizes[ds.cluster_index].astype(float)
        # Per-unit IPW term at label 0 and its increment when the label flips to 1.
        c0 = (1 - a) / (1 - e1)
        d = a / e1 - (1 - a) / (1 - e1)
        penalty = self.cost / (self.n * self.unit_m)
        if self.kind == "addipw":
            self.const = float(np.sum(self.ybar * (ds.cluster_sum(c0 - 1.0) + 1.0)) / self.n)
            self.u = self.ybar[ds.cluster_index] * d / self.n - penalty
        elif self.kind == "noint":
            self.const = float(np.sum(ds.cluster_mean(ds.y * c0)) / self.n)
            self.u = ds.y * d / (self.n * self.unit_m) - penalty
        else:
            self.const = None
            self.u = None
            self.log_cp = ds.cluster_sum(np.log(np.where(ds.a == 1, e1, 1 - e1)))

    @property
    def is_linear(self) -> bool:
        return self.u is not None

    @property
    def is_flat(self) -> bool:
        if self.is_linear:
            return bool(np.all(self.u == 0))
        return bool(np.all(self.ybar == 0)) and self.cost == 0

    def values(self, labels: np.ndarray) -> np.ndarray:
        """Objective for each row of a ``(K, N)`` 0/1 label matrix."""
        lab = np.atleast_2d(labels).astype(float)
        if self.is_linear:
            return self.const + lab @ self.u
        ds = self.dataset
        e_pi = np.where(lab == 1, self.e1, 1 - self.e1)
        w = (lab == ds.a) / e_pi
        treated = np.add.reduceat(lab, ds.starts, axis=1) / ds.sizes
        if self.kind == "ipw":
            weight = np.multiply.reduceat(w, ds.starts, axis=1)
        else:
            rows = [subset_product_sums(_padded(ds, w[k] - 1.0), self.beta) for k in range(lab.shape[0])]
            weight = np.vstack(rows)
        return (weight * self.ybar).mean(axis=1) - self.cost * treated.mean(axis=1)

    def value(self, bits: np.ndarray) -> float:
        return float(self.values(bits)[0])

    def smooth(self, z: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
        """Smoothed objective at unit scores ``z`` and its gradient in ``z``."""
        s = expit(z / tau)
        ds_dz = s * (1 - s) / tau
        if self.is_linear:
            return self.const + float(self.u @ s), self.u * ds_dz
        if self.kind != "ipw":
            raise LearningError(f"no smooth surrogate for objective {self.tag!r}")
        ds = self.dataset
        a = ds.a
        # Product over the cluster of sigmoid matched to A_ij, divided by the cluster propensity.
        logf = np.where(a == 1, log_expit(z / tau), log_expit(-z / tau))
        f = np.exp(ds.cluster_sum(logf) - self.log_cp)
        contrib = self.ybar * f
        penalty = self.cost / (self.n * self.unit_m)
        val = float(contrib.sum() / self.n - penalty @ s)
        grad = contrib[ds.cluster_index] * (a - s) / (tau * self.n) - penalty * ds_dz
        return val, grad


def _standardize(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    center = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    return (x - center) / scale, center, scale


# ---------------------------------------------------------------------------
# Specs and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LearnSpec:
    """Configuration for policy learning.

    ``coefficient_box`` bounds every coefficient (intercept included) on the
    standardised covariate scale.  ``anneal`` multiplies
    ``surrogate_temperature`` across successive L-BFGS passes.
    """

    objective: str = "addipw"
    method: str = "surrogate"
    restarts: int = 20
    surrogate_temperature: float = 1.0
    anneal: tuple[float, ...] = (1.0, 0.3, 0.1)
    seed: int = 0
    coefficient_box: float = 10.0
    cost: float = 0.0
    max_iter: int = 200
    max_candidates: int = 10_000_000

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.surrogate_temperature <= 0 or any(t <= 0 for t in self.anneal):
            raise ValueError("temperatures must be positive")
        if self.method not in ("surrogate", "exact"):
            raise ValueError("method must be 'surrogate' or 'exact'")
        if self.coefficient_box <= 0:
            raise ValueError("coefficient_box must be positive")
        if self.cost < 0:
            raise ValueError("cost must be non-negative")


@dataclass(frozen=True, eq=False)
class LearnedPolicy:
    policy: LinearPolicy
    objective_value: float
    method: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy.to_dict(),
            "objective_value": self.objective_value,
            "method": self.method,
            "raw_coefficients": self.policy.raw_coefficients().tolist(),
            "diagnostics": {k: v for k, v in self.diagnostics.items() if k != "trace"},
        }


def _recheck(objective: PolicyObjective, dataset: ClusterDataset, model: PropensityModel, policy: LinearPolicy,
             value: float) -> None:
    bits = assign(policy, dataset)
    if objective.kind == "addipw":
        est = value_with_cost(dataset, model, policy, objective.cost).value
    else:
        tag = f"poly:{objective.beta}" if objective.kind == "poly" else objective.kind
        est = evaluate(tag, dataset, model, policy).value - objective.cost * float(dataset.cluster_mean(bits).mean())
    if not abs(est - value) <= 1e-9 * max(1.0, abs(value)):
        raise LearningError(f"objective re-check failed: search reported {value!r}, estimator gives {est!r}")


def _better(cand: tuple, best: tuple | None) -> bool:
    """Order (value desc, treated asc, coefficients lexicographic asc)."""
    if best is None:
        return True
    v, t, g = cand
    bv, bt, bg = best
    tol = 1e-12 * max(1.0, abs(v), abs(bv))
    if v > bv + tol:
        return True
    if v < bv - tol:
        return False
    if t != bt:
        return t < bt
    return tuple(g) < tuple(bg)


# ---------------------------------------------------------------------------
# Exact learner
# ---------------------------------------------------------------------------


def _affine_coords(x: np.ndarray, tol: float = 1e-9) -> np.ndarray:
    """Coordinates of the points within their affine hull."""
    xc = x - x.mean(axis=0)
    if xc.size == 0:
        return xc[:, :0]
    _, s, vt = np.linalg.svd(xc, full_matrices=False)
    r = int(np.sum(s > tol * max(1.0, s[0] if s.size else 0.0)))
    return xc @ vt[:r].T


def _count_candidates(n_points: int, r: int) -> int:
    return math.comb(n_points, r) * 2 ** (r + 1) + 2 if r > 0 else 2


def _labelings_iter(x: np.ndarray, chunk: int = 4096, tol: float = 1e-9):
    """Yield ``(K, N)`` boolean blocks covering every linearly realisable labelling.

    Every labelling ``1(g0 + x @ g >= 0)`` is obtained by perturbing a
    hyperplane through ``r`` affinely independent points (``r`` = affine
    dimension): points off the plane keep their side and points on it take any
    labelling realisable within the plane.  Blocks may contain duplicates.
    """
    n_pts = x.shape[0]
    yield np.vstack([np.zeros(n_pts, bool), np.ones(n_pts, bool)])
    if n_pts == 0:
        return
    y = _affine_coords(x)
    r = y.shape[1]
    if r == 0:
        return
    y = y / max(1.0, np.abs(y).max())
    aug = np.column_stack([np.ones(n_pts), y])
    patterns = ((np.arange(2 ** r)[:, None] >> np.arange(r)) & 1).astype(bool)
    it = combinations(range(n_pts), r)
    while True:
        subsets = np.array(list(_take(it, chunk)), dtype=np.int64)
        if subsets.size == 0:
            return
        mats = aug[subsets]
        _, s, vt = np.linalg.svd(mats, full_matrices=True)
        ok = s[:, -1] > tol
        if not ok.any():
            continue
        subsets, normals = subsets[ok], vt[ok, -1, :]
        z = normals @ aug.T
        on = np.abs(z) <= tol * 10
        n_on = on.sum(axis=1)
        simple = n_on == r
        for sign in (1.0, -1.0):
            base = (sign * z) > 0
            if simple.any():
                sub = subsets[simple]
                blk = np.repeat(base[simple][:, None, :], patterns.shape[0], axis=1)
                rows = np.arange(sub.shape[0])[:, None, None]
                blk[rows, np.arange(patterns.shape[0])[None, :, None], sub[:, None, :]] = patterns[None, :, :]
                yield blk.reshape(-1, n_pts)
            for k in np.flatnonzero(~simple):
                idx = np.flatnonzero(on[k])
                for sub_blk in _labelings_iter(x[idx], chunk, tol):
                    blk = np.repeat(base[k][None, :], sub_blk.shape[0], axis=0)
                    blk[:, idx] = sub_blk
                    yield blk


def _take(it, k):
    for _ in range(k):
        try:
            yield next(it)
        except StopIteration:
            return


def realizable_labelings(x: np.ndarray) -> np.ndarray:
    """All distinct labellings of the rows of ``x`` produced by linear threshold rules."""
    blocks = np.vstack(list(_labelings_iter(np.asarray(x, dtype=float))))
    return np.unique(blocks, axis=0)


def separating_coefficients(x: np.ndarray, labels: np.ndarray) -> np.ndarray | None:
    """Max-margin ``(g0, g)`` in ``[-1, 1]`` realising ``labels``, or ``None`` if impossible."""
    x = np.asarray(x, dtype=float)
    lab = np.asarray(labels).astype(bool)
    n_pts, p = x.shape
    aug = np.column_stack([np.ones(n_pts), x])
    sign = np.where(lab, -1.0, 1.0)
    # maximise t subject to sign_i * (aug_i @ g) + t <= 0
    a_ub = np.column_stack([sign[:, None] * aug, np.ones(n_pts)])
    c = np.zeros(p + 2)
    c[-1] = -1.0
    bounds = [(-1.0, 1.0)] * (p + 1) + [(None, 1.0)]
    res = linprog(c, A_ub=a_ub, b_ub=np.zeros(n_pts), bounds=bounds, method="highs")
    if res.status != 0 or -res.fun <= 1e-10:
        return None
    return res.x[:-1]


def learn_linear_exact(dataset: ClusterDataset, model: PropensityModel, estimator_tag: str = "addipw",
                       cost: float = 0.0, max_candidates: int = 10_000_000) -> LearnedPolicy:
    """Exact maximiser of the chosen objective over linear threshold rules.

    Ties are broken by fewer treated units, then lexicographically smaller
    coefficients.
    """
    objective = PolicyObjective(dataset, model, estimator_tag, cost)
    z, center, scale = _standardize(dataset.x)
    r = _affine_coords(z).shape[1]
    n_cand = _count_candidates(dataset.n_units, r)
    if n_cand > max_candidates:
        raise EnumerationTooLarge(
            f"exact search needs ~{n_cand:.3g} candidate labellings for {dataset.n_units} units "
            f"(limit {max_candidates:.3g}); use learn_linear_surrogate instead"
        )
    best_val = -np.inf
    tied: list[np.ndarray] = []
    scored = 0
    for blk in _labelings_iter(z):
        vals = objective.values(blk)
        scored += blk.shape[0]
        top = vals.max()
        tol = 1e-12 * max(1.0, abs(top), abs(best_val) if np.isfinite(best_val) else 1.0)
        if top > best_val + tol:
            best_val = float(top)
            tied = [blk[vals >= top - tol]]
        elif top >= best_val - tol:
            tied.append(blk[vals >= best_val - tol])
    cands = np.unique(np.vstack(tied), axis=0)
    best = None
    for lab in cands:
        g = separating_coefficients(z, lab)
        if g is None:
            raise LearningError("enumerated labelling could not be realised by a separating hyperplane")
        g = np.round(g, 12) + 0.0
        key = (objective.value(lab), int(lab.sum()), g)
        if _better(key, best):
            best = key
    value, _, coef = best
    policy = LinearPolicy(coef, center, scale)
    bits = assign(policy, dataset)
    value = objective.value(bits)
    _recheck(objective, dataset, model, policy, value)
    return LearnedPolicy(policy, value, "exact", {"candidates_scored": scored, "ties": int(cands.shape[0]),
                                                 "affine_dim": r})


# ---------------------------------------------------------------------------
# Surrogate learner
# ---------------------------------------------------------------------------


def smoothed_objective(gamma: np.ndarray, objective: PolicyObjective, z: np.ndarray, tau: float):
    """Smoothed objective at coefficients ``gamma`` over standardised covariates ``z``."""
    scores = gamma[0] + z @ gamma[1:]
    val, dz = objective.smooth(scores, tau)
    return val, np.concatenate(([dz.sum()], z.T @ dz))


def learn_linear_surrogate(dataset: ClusterDataset, model: PropensityModel, spec: LearnSpec | None = None) -> LearnedPolicy:
    """Maximise a sigmoid-smoothed objective by multi-start L-BFGS-B and threshold the result."""
    spec = spec or LearnSpec()
    objective = PolicyObjective(dataset, model, spec.objective, spec.cost)
    z, center, scale = _standardize(dataset.x)
    p1 = z.shape[1] + 1
    box = spec.coefficient_box
    if objective.is_flat:
        coef = np.zeros(p1)
        coef[0] = -1.0
        policy = LinearPolicy(coef, center, scale)
        value = objective.value(assign(policy, dataset))
        return LearnedPolicy(policy, value, "surrogate", {"flat_objective": True, "restarts": []})
    rng = np.random.default_rng(spec.seed)
    taus = [spec.surrogate_temperature * a for a in spec.anneal]
    best = None
    trace = []
    for r in range(spec.restarts):
        gamma = np.clip(rng.normal(size=p1), -box, box)
        info = {"restart": r, "iterations": 0}
        try:
            for tau in taus:
                res = minimize(
                    lambda g, t=tau: tuple(-v for v in smoothed_objective(g, objective, z, t)),
                    gamma, jac=True, method="L-BFGS-B", bounds=[(-box, box)] * p1,
                    options={"maxiter": spec.max_iter},
                )
                if not np.all(np.isfinite(res.x)) or not np.isfinite(res.fun):
                    raise FloatingPointError("non-finite smoothed objective")
                gamma = res.x
                info["iterations"] += int(res.nit)
        except (FloatingPointError, ValueError) as exc:
            info["error"] = str(exc)
            trace.append(info)
            continue
        bits = ((gamma[0] + z @ gamma[1:]) >= 0).astype(np.int8)
        value = objective.value(bits)
        if not np.isfinite(value):
            info["error"] = "non-finite objective"
            trace.append(info)
            continue
        info["objective"] = value
        trace.append(info)
        key = (value, int(bits.sum()), gamma)
        if _better(key, best):
            best = key
    if best is None:
        raise LearningError(f"all {spec.restarts} restarts failed: {[t.get('error') for t in trace]}")
    policy = LinearPolicy(best[2], center, scale)
    value = objective.value(assign(policy, dataset))
    _recheck(objective, dataset, model, policy, value)
    return LearnedPolicy(policy, value, "surrogate", {"flat_objective": False, "restarts": trace})


def learn_ipw_standard_surrogate(dataset: ClusterDataset, model: PropensityModel, spec: LearnSpec | None = None) -> LearnedPolicy:
    """Surrogate learner on the standard (product-weight) IPW objective."""
    spec = replace(spec or LearnSpec(), objective="ipw")
    return learn_linear_surrogate(dataset, model, spec)


def learn(dataset: ClusterDataset, model: PropensityModel, spec: LearnSpec) -> LearnedPolicy:
    if spec.method == "exact":
        return learn_linear_exact(dataset, model, spec.objective, spec.cost, spec.max_candidates)
    return learn_linear_surrogate(dataset, model, spec)


# ---------------------------------------------------------------------------
# Regret bound
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RegretBoundInputs:
    B: float
    m_max: int
    eta: float
    nu: float
    n: int
    delta: float
    c0: float = 1.0

    def __post_init__(self):
        for name in ("B", "m_max", "eta", "nu", "n", "c0"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.delta <= 1:
            raise ValueError("delta must lie in (0, 1]")
        if self.eta > 0.5:
            raise ValueError("eta cannot exceed 0.5")


def compute_regret_bound(inputs: RegretBoundInputs) -> float:
    """Finite-sample regret bound of the additive-IPW learner.

    ``c0`` stands in for an unspecified universal constant, so the value is a
    diagnostic scale rather than a guaranteed bound.
    """
    b, m, eta, nu, n, delta, c0 = (inputs.B, inputs.m_max, inputs.eta, inputs.nu, inputs.n,
                                   inputs.delta, inputs.c0)
    c = b * (m * (1.0 / eta - 1.0) + 1.0)
    return (4 * c / math.sqrt(n)
            + 4 * c0 * (b * m / eta) * math.sqrt(nu / n)
            + 2 * c * math.sqrt(2.0 / n * math.log(1.0 / delta)))
