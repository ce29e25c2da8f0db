"""Synthetic clustered data, Monte-Carlo oracle values and replication studies.

Scenario A has additive spillovers:

    mu_ij = (X1 + .5 X2 - X3 - .5 X4)_ij A_ij
            + 1.5 / (M_i - 1) * sum_{k != j} (X3 + X4)_ik A_ik
            + 0.2 X_ij2 + 0.2 X_ij3

Scenario B adds the non-additive term ``-0.5 (X1^2 + X2^2)_ij A_ij Abar_i(-j)``
where ``Abar_i(-j)`` is the treated share among the other units of the cluster
(0 for singleton clusters).  Outcomes are ``mu + noise_sd * N(0, 1)``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.stats import norm

from ._parallel import map_ordered
from .data import ClusterDataset, ConstantPolicy, LinearPolicy, Policy, assign, policy_from_dict
from .estimators import evaluate
from .learning import LearnSpec, learn
from .propensity import KnownConstant, PropensityFitConfig, fit_propensity

ORACLE_STREAM = 1


class ReplicationError(RuntimeError):
    """Too many replications failed."""

    def __init__(self, message: str, report: "ReplicationReport | None" = None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class ScenarioSpec:
    """Data-generating process for one simulation setting.

    ``covariates`` is ``"normal"`` (iid standard normal) or ``"rademacher"``
    (iid uniform on {-1, 1}).  ``scenario="custom"`` requires ``mean_fn``,
    a callable mapping a :class:`ClusterDataset` to the unit means.
    """

    scenario: str = "A"
    n: int = 200
    sizes: tuple[int, ...] = (5, 10, 15)
    size_probs: tuple[float, ...] | None = None
    p: int = 4
    q: float = 0.3
    noise_sd: float = 1.0
    seed: int = 0
    covariates: str = "normal"
    mean_fn: Callable | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(m) for m in self.sizes))
        if self.size_probs is not None:
            object.__setattr__(self, "size_probs", tuple(float(v) for v in self.size_probs))
        if self.scenario not in ("A", "B", "custom"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "custom" and self.mean_fn is None:
            raise ValueError("custom scenario needs mean_fn")
        if self.scenario in ("A", "B") and self.p < 4:
            raise ValueError("scenarios A and B need p >= 4")
        if self.n < 1 or not self.sizes or min(self.sizes) < 1:
            raise ValueError("n and cluster sizes must be positive")
        if self.size_probs is not None:
            if len(self.size_probs) != len(self.sizes) or min(self.size_probs) < 0:
                raise ValueError("size_probs must match sizes and be non-negative")
            if not math.isclose(sum(self.size_probs), 1.0, abs_tol=1e-9):
                raise ValueError("size_probs must sum to 1")
        if not 0 < self.q < 1:
            raise ValueError("q must lie in (0, 1)")
        if self.noise_sd < 0:
            raise ValueError("noise_sd must be non-negative")
        if self.covariates not in ("normal", "rademacher"):
            raise ValueError("covariates must be 'normal' or 'rademacher'")

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc.pop("mean_fn")
        doc["sizes"] = list(self.sizes)
        doc["size_probs"] = None if self.size_probs is None else list(self.size_probs)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ScenarioSpec":
        doc = dict(doc)
        for key in ("sizes", "size_probs"):
            if doc.get(key) is not None:
                doc[key] = tuple(doc[key])
        return cls(**doc)


def _others_share(ds: ClusterDataset, values: np.ndarray) -> np.ndarray:
    """Mean of ``values`` over the other units of each unit's cluster (0 when alone)."""
    m = ds.sizes[ds.cluster_index]
    total = ds.cluster_sum(values)[ds.cluster_index]
    return np.where(m > 1, (total - values) / np.maximum(m - 1, 1), 0.0)


def scenario_mean(scenario: str, dataset: ClusterDataset) -> np.ndarray:
    """Noiseless unit means for scenario ``"A"`` or ``"B"`` at the dataset's treatments."""
    x = dataset.x
    a = dataset.a.astype(float)
    mu = (x[:, 0] + 0.5 * x[:, 1] - x[:, 2] - 0.5 * x[:, 3]) * a
    mu += 1.5 * _others_share(dataset, (x[:, 2] + x[:, 3]) * a)
    mu += 0.2 * x[:, 1] + 0.2 * x[:, 2]
    if scenario == "B":
        mu -= 0.5 * (x[:, 0] ** 2 + x[:, 1] ** 2) * a * _others_share(dataset, a)
    elif scenario != "A":
        raise ValueError(f"unknown scenario {scenario!r}")
    return mu


def _mean(spec: ScenarioSpec, dataset: ClusterDataset) -> np.ndarray:
    if spec.scenario == "custom":
        return np.asarray(spec.mean_fn(dataset), dtype=float)
    return scenario_mean(spec.scenario, dataset)


def _draw_design(spec: ScenarioSpec, rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    sizes = rng.choice(np.asarray(spec.sizes), size=n, p=spec.size_probs)
    n_units = int(sizes.sum())
    if spec.covariates == "normal":
        x = rng.standard_normal((n_units, spec.p))
    else:
        x = rng.choice(np.array([-1.0, 1.0]), size=(n_units, spec.p))
    return sizes, x


def generate_dataset(spec: ScenarioSpec, seed=None, intervention: Policy | None = None,
                     n: int | None = None) -> ClusterDataset:
    """Draw a dataset from ``spec``.

    ``seed`` overrides ``spec.seed`` (any value accepted by
    ``numpy.random.default_rng``).  With ``intervention`` the treatments are
    set to ``intervention(X)`` instead of being randomised; the noise then
    comes from a different part of the stream, so forced and observed draws
    agree in distribution only.  The known propensity ``q`` is attached to
    every unit.
    """
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    n = spec.n if n is None else int(n)
    sizes, x = _draw_design(spec, rng, n)
    n_units = x.shape[0]
    q = np.full(n_units, spec.q)
    skeleton = ClusterDataset(np.zeros(n_units), np.zeros(n_units, dtype=np.int8), x, sizes, q)
    if intervention is None:
        a = (rng.random(n_units) < spec.q).astype(np.int8)
    else:
        a = assign(intervention, skeleton)
    skeleton = skeleton.with_treatments(a)
    y = _mean(spec, skeleton) + spec.noise_sd * rng.standard_normal(n_units)
    return skeleton.with_outcomes(y)


class OraclePool:
    """Fixed pool of covariate draws used to approximate true policy values.

    Reusing one pool across policies gives common random numbers, so value
    differences carry much less Monte-Carlo noise than the values themselves.
    """

    def __init__(self, spec: ScenarioSpec, n_oracle: int = 10_000, seed=None):
        if n_oracle < 1:
            raise ValueError("n_oracle must be >= 1")
        self.spec = spec
        ss = np.random.SeedSequence([spec.seed, ORACLE_STREAM]) if seed is None else np.random.SeedSequence(seed)
        self._rng_noise = np.random.default_rng(ss.spawn(1)[0])
        rng = np.random.default_rng(ss)
        sizes, x = _draw_design(spec, rng, n_oracle)
        n_units = x.shape[0]
        self.dataset = ClusterDataset(np.zeros(n_units), np.zeros(n_units, dtype=np.int8), x, sizes,
                                      np.full(n_units, spec.q))

    @property
    def n(self) -> int:
        return self.dataset.n

    def cluster_values(self, policy: Policy, include_noise: bool = False) -> np.ndarray:
        ds = self.dataset.with_treatments(assign(policy, self.dataset))
        mu = _mean(self.spec, ds)
        if include_noise:
            mu = mu + self.spec.noise_sd * self._rng_noise.standard_normal(mu.size)
        return ds.cluster_mean(mu)

    def value(self, policy: Policy, include_noise: bool = False) -> tuple[float, float]:
        """``(value, Monte-Carlo standard error)``."""
        v = self.cluster_values(policy, include_noise)
        se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
        return float(v.mean()), se

    def treated_fraction(self, policy: Policy) -> float:
        return float(self.dataset.cluster_mean(assign(policy, self.dataset)).mean())


def true_value_mc(spec: ScenarioSpec, policy: Policy, n_oracle: int = 10_000, include_noise: bool = False,
                  return_se: bool = False, seed=None):
    """Monte-Carlo approximation of ``V(policy)`` from ``n_oracle`` fresh clusters.

    The oracle stream is derived from ``spec.seed`` but never overlaps the
    streams used by :func:`generate_dataset` or :func:`run_replications`.
    """
    value, se = OraclePool(spec, n_oracle, seed).value(policy, include_noise)
    return (value, se) if return_se else value


# Closed forms for Scenario A with standard normal covariates.  The per-unit
# gain from treating unit j, summed over its own and spillover effects, is
# X1 + .5 X2 + .5 X3 + X4 in expectation over cluster composition.
SCENARIO_A_GAIN = np.array([1.0, 0.5, 0.5, 1.0])


def scenario_a_linear_value(policy: LinearPolicy) -> float:
    """Exact ``V`` of a linear rule under Scenario A with standard normal covariates."""
    raw = policy.raw_coefficients()
    g0, g = raw[0], raw[1:]
    gain = np.zeros(g.size)
    gain[:4] = SCENARIO_A_GAIN
    s = float(np.linalg.norm(g))
    if s == 0:
        return 0.0
    return float(gain @ g / s * norm.pdf(g0 / s))


def scenario_a_optimal_policy(p: int = 4) -> LinearPolicy:
    coef = np.zeros(p + 1)
    coef[1:5] = SCENARIO_A_GAIN
    return LinearPolicy(coef)


def scenario_a_optimal_value() -> float:
    return float(np.linalg.norm(SCENARIO_A_GAIN) / math.sqrt(2 * math.pi))


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvaluateProtocol:
    """Estimate the value of fixed policies with several estimators per replication."""

    policies: dict
    estimators: tuple[str, ...] = ("addipw", "ipw")
    propensity: str = "known"

    def tags(self) -> list[str]:
        return [f"{name}/{est}" for name in self.policies for est in self.estimators]


@dataclass(frozen=True)
class LearnProtocol:
    """Learn a policy per learner and score it on a shared oracle pool."""

    learners: dict
    n_oracle: int = 10_000
    propensity: str = "known"

    def tags(self) -> list[str]:
        return list(self.learners)


def _model_for(protocol, spec: ScenarioSpec, dataset: ClusterDataset):
    if protocol.propensity == "known":
        return KnownConstant(spec.q)
    if protocol.propensity == "fitted":
        return fit_propensity(dataset, PropensityFitConfig())
    raise ValueError(f"unknown propensity source {protocol.propensity!r}")


def _replication_seeds(seed: int, reps: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(reps)
    return [int(c.generate_state(1, dtype=np.uint64)[0]) for c in children]


def _run_one(task) -> list[dict]:
    spec, protocol, rep, seed = task
    records = []
    try:
        ds = generate_dataset(spec, seed=seed)
        model = _model_for(protocol, spec, ds)
    except Exception as exc:  # noqa: BLE001 - failures are recorded per replication
        return [{"rep": rep, "seed": seed, "tag": t, "value": math.nan, "treated_frac": math.nan,
                 "error": f"{type(exc).__name__}: {exc}"} for t in protocol.tags()]
    if isinstance(protocol, EvaluateProtocol):
        for name, policy in protocol.policies.items():
            frac = float(ds.cluster_mean(assign(policy, ds)).mean())
            for est in protocol.estimators:
                rec = {"rep": rep, "seed": seed, "tag": f"{name}/{est}", "treated_frac": frac}
                try:
                    rec["value"] = evaluate(est, ds, model, policy).value
                except Exception as exc:  # noqa: BLE001
                    rec["value"], rec["error"] = math.nan, f"{type(exc).__name__}: {exc}"
                records.append(rec)
    else:
        for tag, lspec in protocol.learners.items():
            rec = {"rep": rep, "seed": seed, "tag": tag}
            try:
                res = learn(ds, model, lspec)
                rec["policy"] = res.policy.to_dict()
                rec["objective"] = res.objective_value
            except Exception as exc:  # noqa: BLE001
                rec["error"] = f"{type(exc).__name__}: {exc}"
            records.append(rec)
    return records


@dataclass
class ReplicationReport:
    """Per-replication records plus per-tag summaries."""

    spec: ScenarioSpec
    reps: int
    records: list[dict]
    summary: dict

    @classmethod
    def build(cls, spec: ScenarioSpec, reps: int, records: list[dict]) -> "ReplicationReport":
        summary = {}
        for tag in dict.fromkeys(r["tag"] for r in records):
            vals = np.array([r["value"] for r in records if r["tag"] == tag and "error" not in r], dtype=float)
            failed = sum(1 for r in records if r["tag"] == tag and "error" in r)
            entry = {"n_ok": int(vals.size), "n_failed": failed}
            if vals.size:
                q = np.quantile(vals, [0.05, 0.25, 0.5, 0.75, 0.95])
                sd = float(vals.std(ddof=1)) if vals.size > 1 else 0.0
                entry.update(mean=float(vals.mean()), sd=sd, se=sd / math.sqrt(vals.size),
                             quantiles=dict(zip(("q05", "q25", "q50", "q75", "q95"), map(float, q))))
            entry["high_variance"] = spec.n <= 50
            summary[tag] = entry
        return cls(spec, reps, records, summary)

    def values(self, tag: str) -> np.ndarray:
        return np.array([r["value"] for r in self.records if r["tag"] == tag], dtype=float)

    def to_dict(self) -> dict:
        return {"spec": self.spec.to_dict(), "reps": self.reps, "summary": self.summary, "records": self.records}

    def to_json(self, path: str | Path | None = None) -> str:
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n", encoding="utf-8")
        return text

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rep", "tag", "value", "treated_frac"])
            for r in self.records:
                writer.writerow([r["rep"], r["tag"], repr(float(r["value"])), repr(float(r["treated_frac"]))])


def run_replications(spec: ScenarioSpec, protocol, reps: int, workers: int = 1,
                     pool: OraclePool | None = None, max_failure_rate: float = 0.01) -> ReplicationReport:
    """Run ``reps`` independent replications of ``protocol`` on data drawn from ``spec``.

    Replication ``r`` uses the ``r``-th child of ``SeedSequence(spec.seed)``,
    so records do not depend on ``workers``.  Learned policies are scored on
    ``pool`` (built from ``spec`` when omitted) in the calling process.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    seeds = _replication_seeds(spec.seed, reps)
    tasks = [(spec, protocol, r, s) for r, s in enumerate(seeds)]
    records = [rec for block in map_ordered(_run_one, tasks, workers) for rec in block]
    if isinstance(protocol, LearnProtocol):
        pool = pool or OraclePool(spec, protocol.n_oracle)
        for rec in records:
            if "error" in rec:
                rec["value"], rec["treated_frac"] = math.nan, math.nan
                continue
            policy = policy_from_dict(rec["policy"])
            rec["value"] = pool.value(policy)[0]
            rec["treated_frac"] = pool.treated_fraction(policy)
    report = ReplicationReport.build(spec, reps, records)
    failed = {r["rep"] for r in records if "error" in r}
    if len(failed) > max_failure_rate * reps:
        raise ReplicationError(f"{len(failed)} of {reps} replications failed", report)
    return report


# ---------------------------------------------------------------------------
# Regret curves
# ---------------------------------------------------------------------------


@dataclass
class RegretCurve:
    n_grid: list[int]
    mean_regret: list[float]
    se_regret: list[float]
    mean_value: list[float]
    optimal_value: float
    slope: float
    intercept: float
    reports: list[ReplicationReport] = field(repr=False, default_factory=list)

    def table(self) -> list[dict]:
        return [{"n": n, "mean_regret": r, "se": s, "mean_value": v}
                for n, r, s, v in zip(self.n_grid, self.mean_regret, self.se_regret, self.mean_value)]


def approximate_optimum(spec: ScenarioSpec, pool: OraclePool, learner: LearnSpec, n_fit: int = 5000) -> float:
    """Oracle-pool value of a policy learned on one large sample.

    Used when no optimal policy is supplied; the result is a lower bound on
    the optimum over the linear class.
    """
    ds = generate_dataset(spec, seed=np.random.SeedSequence([spec.seed, ORACLE_STREAM, 1]), n=n_fit)
    res = learn(ds, KnownConstant(spec.q), replace(learner, method="surrogate"))
    return max(pool.value(res.policy)[0], pool.value(ConstantPolicy(0))[0])


def regret_curve(spec: ScenarioSpec, learner: LearnSpec, n_grid, reps: int, optimal_policy: Policy | None = None,
                 optimal_value: float | None = None, n_oracle: int = 10_000, workers: int = 1) -> RegretCurve:
    """Mean regret ``V(pi*) - V(pi_hat_n)`` over ``n_grid`` and its log-log slope.

    All values, including the optimum, are computed on one oracle pool.
    ``optimal_value`` is only used when no ``optimal_policy`` is given.
    """
    if reps < 20:
        warnings.warn(f"regret_curve with reps={reps} < 20 gives an unstable slope", stacklevel=2)
    pool = OraclePool(spec, n_oracle)
    if optimal_policy is not None:
        v_star = pool.value(optimal_policy)[0]
    elif optimal_value is not None:
        v_star = float(optimal_value)
    else:
        v_star = approximate_optimum(spec, pool, learner)
    protocol = LearnProtocol({"learner": learner}, n_oracle=n_oracle)
    means, ses, vals, reports = [], [], [], []
    for n in n_grid:
        sub = replace(spec, n=int(n))
        report = run_replications(sub, protocol, reps, workers=workers, pool=pool)
        v = report.values("learner")
        v = v[np.isfinite(v)]
        regret = v_star - v
        means.append(float(regret.mean()))
        ses.append(float(regret.std(ddof=1) / math.sqrt(regret.size)) if regret.size > 1 else 0.0)
        vals.append(float(v.mean()))
        reports.append(report)
    m = np.array(means)
    ok = m > 0
    if ok.sum() >= 2:
        slope, intercept = np.polyfit(np.log(np.asarray(n_grid, float)[ok]), np.log(m[ok]), 1)
    else:
        slope = intercept = math.nan
    if not ok.all():
        warnings.warn("non-positive mean regret at some n; excluded from the slope fit", stacklevel=2)
    return RegretCurve(list(map(int, n_grid)), means, ses, vals, v_star, float(slope), float(intercept), reports)
