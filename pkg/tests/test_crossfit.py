import csv

import numpy as np
import pytest

from clusteritr.crossfit import CrossfitError, CrossfitSpec, crossfit_evaluate, make_folds, normalize_coefficients
from clusteritr.data import ClusterDataset, assign
from clusteritr.estimators import value_addipw
from clusteritr.learning import LearnSpec
from clusteritr.propensity import KnownConstant, KnownTable
from clusteritr.simulation import ScenarioSpec, generate_dataset

FAST = LearnSpec(restarts=3)


def household_data(seed, n=120):
    return generate_dataset(ScenarioSpec("A", n=n, sizes=(1, 2, 3, 4, 5), seed=seed))


class TestFolds:
    def test_partition(self):
        folds = make_folds(103, 5, seed=1)
        counts = np.bincount(folds)
        assert counts.sum() == 103 and set(counts) <= {20, 21}
        np.testing.assert_array_equal(make_folds(103, 5, seed=1), folds)

    def test_too_many_folds(self):
        with pytest.raises(CrossfitError):
            make_folds(3, 5, seed=0)

    def test_empty_fold_reported(self):
        ds = household_data(0, n=20)
        folds = np.zeros(20, dtype=int)
        folds[:10] = 2
        with pytest.raises(CrossfitError, match="fold 1") as err:
            crossfit_evaluate(ds, KnownConstant(0.3), CrossfitSpec(K=3, learner=FAST), folds=folds)
        assert err.value.fold == 1

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            CrossfitSpec(K=1)
        with pytest.raises(ValueError):
            CrossfitSpec(cost_grid=(0.1, -0.2))


class TestCrossfitEvaluate:
    def test_pooled_value_is_weighted_mean(self):
        ds = household_data(1)
        res = crossfit_evaluate(ds, KnownConstant(0.3), CrossfitSpec(learner=FAST))
        for row in res.rows:
            sizes = np.array(row.fold_sizes)
            assert sizes.sum() == ds.n
            assert row.value == pytest.approx(np.dot(sizes, row.fold_values) / ds.n, rel=1e-12)
            assert row.treated == pytest.approx(np.dot(sizes, row.fold_treated) / ds.n, rel=1e-12)
        assert [r.cost for r in res.rows] == [0.15, 0.2, 0.25]

    def test_every_cluster_scored_once(self):
        ds = household_data(2)
        res = crossfit_evaluate(ds, KnownConstant(0.3), CrossfitSpec(K=4, learner=FAST, cost_grid=(0.2,)))
        assert sorted(np.concatenate([np.flatnonzero(res.folds == k) for k in range(4)]).tolist()) == list(range(ds.n))

    @pytest.mark.parametrize("method", ["surrogate", "exact"])
    def test_nonpositive_gains_treat_nobody(self, method, rng):
        n = 12
        a = np.array([1, 0] * (n // 2))
        ds = ClusterDataset(1.0 - 2.0 * a, a, rng.normal(size=(n, 1)), np.ones(n, int), np.full(n, 0.5))
        spec = CrossfitSpec(K=2, cost_grid=(0.0,), learner=LearnSpec(method=method, restarts=3))
        row = crossfit_evaluate(ds, KnownTable(), spec).rows[0]
        assert row.treated == 0.0
        assert all(assign(r.policy, ds).sum() == 0 for r in row.fold_results)
        from clusteritr.data import ConstantPolicy
        assert row.value == pytest.approx(value_addipw(ds, KnownTable(), ConstantPolicy(0)).value, abs=1e-12)

    def test_duplicated_dataset_symmetry(self):
        ds = household_data(3, n=60)
        doubled = ds.subset(np.concatenate([np.arange(ds.n), np.arange(ds.n)]))
        folds = np.repeat([0, 1], ds.n)
        res = crossfit_evaluate(doubled, KnownConstant(0.3), CrossfitSpec(K=2, learner=FAST, cost_grid=(0.2,)),
                                folds=folds)
        r0, r1 = res.rows[0].fold_results
        assert r0.policy.to_json() == r1.policy.to_json()
        assert res.rows[0].fold_values[0] == pytest.approx(res.rows[0].fold_values[1], rel=1e-12)

    def test_no_leakage(self):
        ds = household_data(4)
        spec = CrossfitSpec(K=3, learner=FAST, cost_grid=(0.2,))
        folds = make_folds(ds.n, 3, seed=0)
        base = crossfit_evaluate(ds, KnownConstant(0.3), spec, folds=folds).rows[0]
        in_fold = np.isin(ds.cluster_index, np.flatnonzero(folds == 0))
        y = ds.y.copy()
        y[in_fold] += 5.0
        moved = crossfit_evaluate(ds.with_outcomes(y), KnownConstant(0.3), spec, folds=folds).rows[0]
        # fold 0's policy ignores its own outcomes but its score moves with them
        assert moved.fold_results[0].policy.to_json() == base.fold_results[0].policy.to_json()
        assert moved.fold_values[0] != base.fold_values[0]
        # other folds train on fold 0, so their scores only move through their policies
        for k in (1, 2):
            if moved.fold_results[k].policy.to_json() == base.fold_results[k].policy.to_json():
                assert moved.fold_values[k] == base.fold_values[k]

    def test_normalised_coefficients_and_outputs(self, tmp_path):
        ds = household_data(5)
        res = crossfit_evaluate(ds, KnownConstant(0.3), CrossfitSpec(K=2, learner=FAST), full_fit=True)
        for row in res.rows:
            for c in row.fold_coefficients():
                assert abs(c[0]) == pytest.approx(1.0)
        assert set(res.full_fits) == {0.15, 0.2, 0.25}
        res.to_csv(tmp_path / "v.csv")
        res.coefficients_csv(tmp_path / "c.csv")
        with open(tmp_path / "c.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0] == ["cost", "fold", "intercept", "X1", "X2", "X3", "X4"]
        assert len(rows) == 1 + 3 * 2
        doc = res.to_dict()
        assert "full_data_coefficients" in doc and len(doc["rows"]) == 3

    def test_zero_intercept_left_unnormalised(self):
        c, ok = normalize_coefficients(np.array([0.0, 2.0, -1.0]))
        assert not ok
        np.testing.assert_array_equal(c, [0.0, 2.0, -1.0])

    def test_parallel_matches_serial(self):
        ds = household_data(6, n=60)
        spec = CrossfitSpec(K=2, learner=FAST, cost_grid=(0.2,))
        a = crossfit_evaluate(ds, KnownConstant(0.3), spec).to_json()
        b = crossfit_evaluate(ds, KnownConstant(0.3), spec, workers=2).to_json()
        assert a == b

    def test_learner_failure_names_fold(self, rng):
        ds = household_data(7, n=20)
        spec = CrossfitSpec(K=2, learner=LearnSpec(method="exact", max_candidates=10), cost_grid=(0.2,))
        with pytest.raises(CrossfitError, match="fold 0"):
            crossfit_evaluate(ds, KnownConstant(0.3), spec)


@pytest.mark.slow
def test_additive_learner_beats_standard_ipw():
    wins = []
    for seed in range(50):
        ds = household_data(seed, n=1010)
        values = {}
        for obj in ("addipw", "ipw"):
            spec = CrossfitSpec(learner=LearnSpec(objective=obj, seed=seed), seed=seed)
            values[obj] = np.array([r.value for r in crossfit_evaluate(ds, KnownConstant(0.3), spec).rows])
        wins.append(values["addipw"] >= values["ipw"])
    rate = np.mean(wins, axis=0)
    assert np.all(rate >= 0.8), rate
