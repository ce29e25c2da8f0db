import collections
import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusteritr.data import (
    Cluster,
    ClusterDataset,
    ConstantPolicy,
    CsvSchema,
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidTreatmentError,
    LinearPolicy,
    MissingColumnError,
    MissingValueError,
    RaggedRowError,
    TreePolicy,
    assign,
    load_dataset,
    load_policy,
    policy_assignment,
    policy_from_dict,
    save_dataset,
    save_policy,
)
from conftest import random_dataset


def write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


HEADER = ["cluster_id", "unit_id", "Y", "A", "X1"]


class TestLoadDataset:
    def test_minimal_file(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", HEADER, [["c", 1, 0.5, 1, 2.0], ["c", 2, 1.5, 0, -1.0]])
        ds = load_dataset(f)
        assert ds.n == 1
        assert ds.cluster(0).m == 2
        assert ds.p == 1
        np.testing.assert_array_equal(ds.a, [1, 0])
        assert ds.propensity is None

    def test_non_binary_treatment_names_row(self, tmp_path):
        rows = [["c", k, 0.0, 0, 0.0] for k in range(1, 7)]
        rows[4][3] = 2
        f = write_csv(tmp_path / "d.csv", HEADER, rows)
        with pytest.raises(InvalidTreatmentError, match="row 5"):
            load_dataset(f)

    def test_m_max_matches_independent_count(self, tmp_path, rng):
        rows = []
        for cid, m in enumerate((5, 10, 15, 10)):
            rows += [[f"k{cid}", j, rng.normal(), int(rng.integers(2)), rng.normal()] for j in range(m)]
        f = write_csv(tmp_path / "d.csv", HEADER, rows)
        with open(f) as fh:
            counts = collections.Counter(r["cluster_id"] for r in csv.DictReader(fh))
        ds = load_dataset(f)
        assert ds.m_max == max(counts.values()) == 15
        assert sorted(ds.sizes.tolist()) == sorted(counts.values())

    def test_clusters_grouped_in_first_appearance_order(self, tmp_path):
        rows = [["b", 1, 1.0, 0, 0.1], ["a", 1, 2.0, 1, 0.2], ["b", 2, 3.0, 1, 0.3]]
        ds = load_dataset(write_csv(tmp_path / "d.csv", HEADER, rows))
        assert ds.cluster_ids == ("b", "a")
        np.testing.assert_array_equal(ds.y, [1.0, 3.0, 2.0])

    def test_missing_column(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", ["cluster_id", "unit_id", "Y", "X1"], [["c", 1, 0.0, 0.0]])
        with pytest.raises(MissingColumnError, match="'A'"):
            load_dataset(f)

    def test_ragged_row(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("cluster_id,unit_id,Y,A,X1\nc,1,0,1,0.5\nc,2,0,1\n")
        with pytest.raises(RaggedRowError, match="row 2"):
            load_dataset(f)

    def test_empty_file(self, tmp_path):
        f = tmp_path / "d.csv"
        f.write_text("")
        with pytest.raises(EmptyDatasetError):
            load_dataset(f)
        f.write_text(",".join(HEADER) + "\n")
        with pytest.raises(EmptyDatasetError):
            load_dataset(f)

    def test_missing_value_rejected(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", HEADER, [["c", 1, 0.0, 1, ""]])
        with pytest.raises(MissingValueError, match="row 1"):
            load_dataset(f)

    def test_known_propensity_column(self, tmp_path):
        f = write_csv(tmp_path / "d.csv", HEADER + ["e1"], [["c", 1, 0.0, 1, 0.0, 0.3]])
        np.testing.assert_array_equal(load_dataset(f).propensity, [0.3])
        assert load_dataset(f, CsvSchema(propensity=None)).propensity is None

    def test_round_trip(self, tmp_path, rng):
        ds = random_dataset(rng, n=15, p=3)
        save_dataset(ds, tmp_path / "a.csv")
        back = load_dataset(tmp_path / "a.csv")
        np.testing.assert_array_equal(back.y, ds.y)
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.a, ds.a)
        np.testing.assert_array_equal(back.sizes, ds.sizes)
        np.testing.assert_array_equal(back.propensity, ds.propensity)
        save_dataset(back, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


class TestClusterDataset:
    def test_cluster_views_and_sums(self, rng):
        ds = random_dataset(rng, n=8)
        for i, c in enumerate(ds.clusters):
            np.testing.assert_array_equal(c.outcomes, ds.y[ds.unit_slice([i])])
            assert ds.cluster_sum(ds.y)[i] == pytest.approx(c.outcomes.sum())
        assert ds.m_max == ds.sizes.max()

    def test_from_clusters_rejects_mixed_dimension(self):
        c1 = Cluster("a", np.zeros(1), np.zeros(1, int), np.zeros((1, 2)))
        c2 = Cluster("b", np.zeros(1), np.zeros(1, int), np.zeros((1, 3)))
        with pytest.raises(DimensionMismatchError):
            ClusterDataset.from_clusters([c1, c2])

    def test_cluster_validation(self):
        with pytest.raises(ValueError):
            Cluster("a", np.zeros(2), np.array([0, 2]), np.zeros((2, 1)))
        with pytest.raises(ValueError):
            Cluster("a", np.zeros(2), np.zeros(3, int), np.zeros((2, 1)))

    def test_subset_preserves_clusters(self, rng):
        ds = random_dataset(rng, n=10)
        sub = ds.subset([7, 2])
        np.testing.assert_array_equal(sub.y, np.concatenate([ds.cluster(7).outcomes, ds.cluster(2).outcomes]))
        assert sub.cluster_ids == (ds.cluster_ids[7], ds.cluster_ids[2])

    def test_immutable(self, rng):
        ds = random_dataset(rng, n=3)
        with pytest.raises(ValueError):
            ds.y[0] = 1.0


class TestPolicies:
    def test_constant_zero(self, rng):
        c = random_dataset(rng, n=1, sizes=(4,), p=3).cluster(0)
        np.testing.assert_array_equal(policy_assignment(ConstantPolicy(0), c).bits, [0, 0, 0, 0])

    def test_linear_boundary_is_treated(self):
        pol = LinearPolicy([-2, 0.5, 1, 1, 0.5])
        np.testing.assert_array_equal(pol.decide(np.array([[4.0, 0, 0, 0]])), [1])
        np.testing.assert_array_equal(pol.decide(np.array([[3.9, 0, 0, 0]])), [0])

    def test_depth2_tree(self):
        tree = TreePolicy.conjunction(0, 0.5, 1, 0.5)
        np.testing.assert_array_equal(tree.decide(np.array([[0.6, 0.4], [0.6, 0.6], [0.4, 0.9]])), [0, 1, 0])

    def test_with_intercept_and_purity(self, rng):
        c = random_dataset(rng, n=1, sizes=(5,)).cluster(0)
        pol = LinearPolicy([0.1, 1.0, -1.0])
        first = policy_assignment(pol, c)
        np.testing.assert_array_equal(first.bits, policy_assignment(pol, c).bits)
        np.testing.assert_array_equal(first.with_intercept, np.concatenate(([1], first.bits)))
        np.testing.assert_array_equal(first.bits, pol.decide(c.covariates))

    def test_dimension_mismatch(self, rng):
        c = random_dataset(rng, n=1, sizes=(2,), p=2).cluster(0)
        with pytest.raises(DimensionMismatchError):
            policy_assignment(LinearPolicy([0, 1, 1, 1]), c)
        with pytest.raises(DimensionMismatchError):
            policy_assignment(TreePolicy.conjunction(0, 0.0, 3, 0.0), c)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-3, 1e3), st.integers(0, 10_000))
    def test_linear_scale_invariance(self, c, seed):
        r = np.random.default_rng(seed)
        x = r.normal(size=(30, 3))
        coef = r.normal(size=4)
        np.testing.assert_array_equal(LinearPolicy(coef).decide(x), LinearPolicy(c * coef).decide(x))

    def test_standardised_policy_raw_coefficients(self, rng):
        x = rng.normal(size=(50, 2))
        pol = LinearPolicy([0.3, 1.0, -2.0], center=[0.5, -1.0], scale=[2.0, 0.5])
        raw = pol.raw_coefficients()
        np.testing.assert_allclose(pol.score(x), raw[0] + x @ raw[1:], atol=1e-12)

    @pytest.mark.parametrize("pol", [LinearPolicy([1, 2], [0.5], [3.0]), TreePolicy.conjunction(0, 0.5, 1, 0.5),
                                     ConstantPolicy(1)])
    def test_json_round_trip(self, pol, tmp_path, rng):
        save_policy(pol, tmp_path / "p.json")
        back = load_policy(tmp_path / "p.json")
        doc = json.loads((tmp_path / "p.json").read_text())
        assert set(doc) == {"kind", "params"}
        x = rng.normal(size=(40, 2))
        if isinstance(pol, LinearPolicy):
            x = x[:, :1]
        np.testing.assert_array_equal(back.decide(x), pol.decide(x))
        assert policy_from_dict(pol.to_dict()).to_dict() == pol.to_dict()

    def test_assign_matches_per_cluster(self, rng):
        ds = random_dataset(rng, n=6)
        pol = LinearPolicy([0.0, 1.0, 0.5])
        flat = assign(pol, ds)
        np.testing.assert_array_equal(flat, np.concatenate([policy_assignment(pol, c).bits for c in ds.clusters]))
