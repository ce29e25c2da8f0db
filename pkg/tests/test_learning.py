import itertools
import math

import numpy as np
import pytest
from scipy.optimize import linprog

from clusteritr.data import ClusterDataset, assign
from clusteritr.estimators import value_addipw, value_with_cost
from clusteritr.learning import (
    EnumerationTooLarge,
    LearnSpec,
    PolicyObjective,
    RegretBoundInputs,
    compute_regret_bound,
    learn,
    learn_ipw_standard_surrogate,
    learn_linear_exact,
    learn_linear_surrogate,
    realizable_labelings,
    smoothed_objective,
)
from clusteritr.propensity import KnownConstant, KnownTable
from conftest import random_dataset


def linearly_realizable(x, labels):
    """LP feasibility of 1(g0 + x g >= 0) == labels (independent of the learner's LP)."""
    aug = np.column_stack([np.ones(len(x)), x])
    # label 1: -aug g <= 0 ; label 0: aug g <= -1
    a_ub = np.where(labels[:, None] == 1, -aug, aug)
    b_ub = np.where(labels == 1, 0.0, -1.0)
    res = linprog(np.zeros(aug.shape[1]), A_ub=a_ub, b_ub=b_ub, bounds=[(None, None)] * aug.shape[1],
                  method="highs")
    return res.status == 0


def brute_force_best(dataset, model, tag):
    """Best objective over all linearly realisable labelings of the standardised covariates."""
    obj = PolicyObjective(dataset, model, tag)
    labs = np.array(list(itertools.product((0, 1), repeat=dataset.n_units)), dtype=np.int8)
    vals = obj.values(labs)
    z = (dataset.x - dataset.x.mean(0)) / dataset.x.std(0)
    for k in np.argsort(-vals, kind="stable"):
        if linearly_realizable(z, labs[k]):
            return vals[k]
    raise AssertionError("no realisable labeling")


def cover_count(n_points, dim):
    return 2 * sum(math.comb(n_points - 1, k) for k in range(dim + 1))


class TestRealizableLabelings:
    @pytest.mark.parametrize("n_points,dim", [(5, 1), (7, 2), (8, 3), (9, 2)])
    def test_general_position_count(self, n_points, dim, rng):
        x = rng.normal(size=(n_points, dim))
        assert len(realizable_labelings(x)) == cover_count(n_points, dim)

    def test_every_labeling_is_realisable(self, rng):
        x = rng.normal(size=(7, 2))
        for lab in realizable_labelings(x):
            assert linearly_realizable(x, lab.astype(int))

    def test_degenerate_points(self):
        # collinear points in the plane behave like points on a line; duplicates share labels
        x = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 2.0], [2.0, 2.0]])
        labs = realizable_labelings(x)
        assert len(labs) == 2 * 3
        assert np.all(labs[:, 2] == labs[:, 3])


class TestExactLearner:
    @pytest.mark.parametrize("seed", range(6))
    def test_matches_brute_force_pairs(self, seed):
        rng = np.random.default_rng(seed)
        ds = random_dataset(rng, n=6, sizes=(2,), p=1)
        res = learn_linear_exact(ds, KnownTable(), "addipw")
        assert res.objective_value == pytest.approx(brute_force_best(ds, KnownTable(), "addipw"), abs=1e-9)

    @pytest.mark.parametrize("tag", ["noint", "ipw", "poly:2", "addipw-cost:0.3"])
    def test_matches_brute_force_other_objectives(self, tag, rng):
        ds = random_dataset(rng, n=5, sizes=(1, 2, 3), p=2)
        res = learn_linear_exact(ds, KnownTable(), tag)
        assert res.objective_value == pytest.approx(brute_force_best(ds, KnownTable(), tag), abs=1e-9)

    def test_nonpositive_gains_give_treat_nobody(self, rng):
        x = rng.normal(size=(8, 2))
        a = np.array([1, 0] * 4)
        ds = ClusterDataset(1.0 - 2.0 * a, a, x, np.ones(8, int), np.full(8, 0.4))
        res = learn_linear_exact(ds, KnownTable(), "addipw")
        assert assign(res.policy, ds).sum() == 0
        assert res.objective_value == pytest.approx(value_addipw(ds, KnownTable(), res.policy).value, abs=1e-12)

    def test_objective_rechecks_against_estimator(self, rng):
        ds = random_dataset(rng, n=6, sizes=(1, 2), p=2)
        res = learn_linear_exact(ds, KnownTable(), "addipw")
        assert res.objective_value == pytest.approx(value_addipw(ds, KnownTable(), res.policy).value, abs=1e-9)
        res = learn_linear_exact(ds, KnownTable(), "addipw", cost=0.2)
        assert res.objective_value == pytest.approx(value_with_cost(ds, KnownTable(), res.policy, 0.2).value, abs=1e-9)

    def test_scale_invariance(self, rng):
        ds = random_dataset(rng, n=6, sizes=(1, 2), p=2)
        base = assign(learn_linear_exact(ds, KnownTable()).policy, ds)
        for c in (0.01, 7.0, 1e3):
            scaled = ds.with_covariates(c * ds.x)
            np.testing.assert_array_equal(assign(learn_linear_exact(scaled, KnownTable()).policy, scaled), base)

    def test_guard(self, rng):
        ds = random_dataset(rng, n=30, sizes=(5,), p=4)
        with pytest.raises(EnumerationTooLarge, match="surrogate"):
            learn_linear_exact(ds, KnownTable(), max_candidates=1000)

    def test_unsupported_objective(self, rng):
        with pytest.raises(ValueError, match="not supported"):
            learn_linear_exact(random_dataset(rng, n=3), KnownTable(), "dr")

    def test_dispatch(self, rng):
        ds = random_dataset(rng, n=5, sizes=(1, 2), p=1)
        assert learn(ds, KnownTable(), LearnSpec(method="exact")).method == "exact"


class TestSurrogateLearner:
    def test_deterministic(self, rng):
        ds = random_dataset(rng, n=40, p=3)
        a = learn_linear_surrogate(ds, KnownTable(), LearnSpec(restarts=4, seed=3))
        b = learn_linear_surrogate(ds, KnownTable(), LearnSpec(restarts=4, seed=3))
        assert a.policy.to_json() == b.policy.to_json()
        assert a.objective_value == b.objective_value

    @pytest.mark.parametrize("seed", range(5))
    def test_exact_dominates(self, seed):
        rng = np.random.default_rng(100 + seed)
        ds = random_dataset(rng, n=6, sizes=(1, 2), p=2)
        for tag in ("addipw", "ipw"):
            exact = learn_linear_exact(ds, KnownTable(), tag)
            sur = learn_linear_surrogate(ds, KnownTable(), LearnSpec(objective=tag, restarts=3))
            assert exact.objective_value >= sur.objective_value - 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_sharp_limit_recovers_exact_labeling(self, seed):
        x = np.array([-2.0, -1.5, -1.0, 1.0, 1.5, 2.0]).reshape(-1, 1)
        ds = ClusterDataset(np.sign(x[:, 0]), np.ones(6, int), x, np.ones(6, int), np.full(6, 0.5))
        exact = learn_linear_exact(ds, KnownTable())
        sur = learn_linear_surrogate(ds, KnownTable(), LearnSpec(restarts=1, seed=seed, anneal=(1.0, 0.3, 0.1, 0.03, 0.01)))
        np.testing.assert_array_equal(assign(sur.policy, ds), assign(exact.policy, ds))
        np.testing.assert_array_equal(assign(exact.policy, ds), [0, 0, 0, 1, 1, 1])

    def test_flat_objective_flagged(self, rng):
        ds = random_dataset(rng, n=10)
        res = learn_linear_surrogate(ds.with_outcomes(np.zeros(ds.n_units)), KnownTable())
        assert res.diagnostics["flat_objective"] is True
        assert res.objective_value == 0.0

    def test_restart_trace(self, rng):
        ds = random_dataset(rng, n=20)
        res = learn_linear_surrogate(ds, KnownTable(), LearnSpec(restarts=3))
        assert [t["restart"] for t in res.diagnostics["restarts"]] == [0, 1, 2]
        assert res.objective_value == max(t["objective"] for t in res.diagnostics["restarts"])

    def test_coefficients_respect_box(self, rng):
        ds = random_dataset(rng, n=30)
        res = learn_linear_surrogate(ds, KnownTable(), LearnSpec(restarts=3, coefficient_box=0.5))
        assert np.all(np.abs(res.policy.coef) <= 0.5)

    def test_ipw_collapse_for_singletons(self, rng):
        ds = random_dataset(rng, n=40, sizes=(1,), p=2)
        spec = LearnSpec(restarts=3, seed=1)
        a = learn_ipw_standard_surrogate(ds, KnownTable(), spec)
        b = learn_linear_surrogate(ds, KnownTable(), spec)
        np.testing.assert_array_equal(assign(a.policy, ds), assign(b.policy, ds))
        assert a.objective_value == pytest.approx(b.objective_value, abs=1e-9)

    def test_ipw_smooth_limit_matching_cluster(self):
        y = np.array([1.0, 2.0, 4.0])
        a = np.array([1, 0, 1])
        ds = ClusterDataset(y, a, np.zeros((3, 1)), np.array([3]), np.array([0.3, 0.4, 0.6]))
        obj = PolicyObjective(ds, KnownTable(), "ipw")
        z = np.where(a == 1, 1.0, -1.0)
        val, _ = obj.smooth(z, 1e-3)
        assert val == pytest.approx(y.mean() / (0.3 * 0.6 * 0.6), rel=1e-12)


class TestGradient:
    @pytest.mark.parametrize("tag", ["addipw", "noint", "ipw", "addipw-cost:0.2"])
    def test_central_differences(self, tag):
        rng = np.random.default_rng(7)
        ds = random_dataset(rng, n=15, sizes=(1, 2, 3, 4), p=3)
        obj = PolicyObjective(ds, KnownTable(), tag)
        z = (ds.x - ds.x.mean(0)) / ds.x.std(0)
        h = 1e-6
        for _ in range(10):
            g = rng.normal(size=4)
            _, grad = smoothed_objective(g, obj, z, 0.7)
            fd = np.array([(smoothed_objective(g + h * e, obj, z, 0.7)[0] - smoothed_objective(g - h * e, obj, z, 0.7)[0])
                           / (2 * h) for e in np.eye(4)])
            assert np.linalg.norm(grad - fd) / max(np.linalg.norm(fd), 1e-12) < 1e-5


class TestLearnSpec:
    @pytest.mark.parametrize("kw", [dict(restarts=0), dict(surrogate_temperature=0.0), dict(method="mip"),
                                    dict(cost=-1.0), dict(coefficient_box=0)])
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            LearnSpec(**kw)


class TestRegretBound:
    def test_worked_example(self):
        assert compute_regret_bound(RegretBoundInputs(B=1, m_max=1, eta=0.5, nu=1, n=4, delta=1, c0=1)) == pytest.approx(8.0)

    @pytest.mark.parametrize("n", [1, 10, 333])
    def test_inverse_sqrt_homogeneity(self, n):
        base = RegretBoundInputs(B=2, m_max=5, eta=0.1, nu=3, n=n, delta=0.05)
        quad = RegretBoundInputs(B=2, m_max=5, eta=0.1, nu=3, n=4 * n, delta=0.05)
        assert compute_regret_bound(quad) == pytest.approx(compute_regret_bound(base) / 2, rel=1e-14)

    def test_decreasing_in_eta(self):
        etas = np.linspace(0.02, 0.5, 25)
        vals = [compute_regret_bound(RegretBoundInputs(1, 10, e, 5, 100, 0.1)) for e in etas]
        assert np.all(np.diff(vals) < 0)

    @pytest.mark.parametrize("kw", [dict(delta=0.0), dict(delta=1.5), dict(n=0), dict(eta=0.6), dict(B=-1)])
    def test_validation(self, kw):
        args = dict(B=1, m_max=2, eta=0.1, nu=1, n=10, delta=0.1) | kw
        with pytest.raises(ValueError):
            RegretBoundInputs(**args)
