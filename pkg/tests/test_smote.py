"""Balancing plan and synthetic interpolation against brute-force neighbour search."""
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hqforest.errors import DegenerateDataWarning, SingleClass
from hqforest.smote import interpolation_weight, plan_balancing, smote_balance


def _imbalanced(seed, sizes=(40, 11, 5), p=3):
    rng = np.random.default_rng(seed)
    labels = np.concatenate([np.full(n, c + 1) for c, n in enumerate(sizes)])
    feats = rng.normal(size=(labels.size, p)) + labels[:, None]
    het = rng.integers(0, 3, labels.size).astype(float)
    return feats, labels, het


def check_balanced_set(out, feats, labels, plan, m):
    """Assert the invariants every balanced set must satisfy."""
    n = labels.size
    np.testing.assert_array_equal(out.features[:n], feats)
    np.testing.assert_array_equal(out.labels[:n], labels)
    counts = np.bincount(out.labels)[1:]
    counts = counts[counts > 0]
    assert counts.max() - counts.min() <= 1
    for row in np.flatnonzero(out.synthetic):
        a, b = out.parents[row]
        c = out.labels[row]
        assert labels[a] == c and labels[b] == c
        if c in out.duplicated:
            np.testing.assert_array_equal(out.features[row], feats[a])
            continue
        expected = m * feats[a] + (1 - m) * feats[b]
        scale = np.abs(feats[a]).max() + np.abs(feats[b]).max()
        assert np.abs(out.features[row] - expected).max() <= 4e-16 * scale
        lo, hi = np.minimum(feats[a], feats[b]), np.maximum(feats[a], feats[b])
        assert np.all(out.features[row] >= lo) and np.all(out.features[row] <= hi)
        same = np.flatnonzero(labels == c)
        dists = np.sort([np.linalg.norm(feats[a] - feats[j]) for j in same if j != a])
        k = min(plan.n_neigh[c], same.size - 1)
        assert np.linalg.norm(feats[a] - feats[b]) <= dists[k - 1] + 1e-12


class TestPlan:
    def test_rates_and_pool_sizes(self):
        plan = plan_balancing([1] * 40 + [2] * 11 + [3] * 5)
        assert plan.majority == 1 and plan.target == 40
        assert plan.rates[3] == 800.0 and plan.n_neigh == {2: 4, 3: 8}
        assert plan.per_sample[2] == pytest.approx(29 / 11) and plan.per_sample[1] == 0

    def test_majority_ties_go_to_smallest_class(self):
        assert plan_balancing([3, 3, 2, 2, 1]).majority == 2

    def test_single_class_rejected(self):
        with pytest.raises(SingleClass):
            plan_balancing([2, 2, 2])

    def test_weight(self):
        assert interpolation_weight(2, 5) == 2 / 6
        with pytest.raises(ValueError):
            interpolation_weight(0, 5)


class TestBalance:
    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.lists(st.integers(2, 30), min_size=2, max_size=4),
           st.integers(1, 5))
    def test_invariants(self, seed, sizes, w):
        feats, labels, het = _imbalanced(seed, sizes)
        plan = plan_balancing(labels)
        out = smote_balance(feats, labels, het, plan, w, 5, np.random.default_rng(seed))
        check_balanced_set(out, feats, labels, plan, w / 6)
        assert np.all(np.bincount(out.labels)[1:][np.bincount(labels)[1:] > 0] == plan.target)

    def test_usage_is_spread_evenly(self):
        feats, labels, het = _imbalanced(1, (23, 5))
        out = smote_balance(feats, labels, het, plan_balancing(labels), 1, 3,
                            np.random.default_rng(0))
        uses = np.bincount(out.parents[out.synthetic, 0], minlength=labels.size)[23:]
        assert sorted(set(uses)) == [3, 4] and uses.sum() == 18

    def test_heterogeneity_is_interpolated(self):
        feats, labels, het = _imbalanced(2)
        out = smote_balance(feats, labels, het, plan_balancing(labels), 3, 4,
                            np.random.default_rng(0))
        rows = np.flatnonzero(out.synthetic)
        a, b = out.parents[rows].T
        np.testing.assert_allclose(out.heterogeneity[rows], 0.6 * het[a] + 0.4 * het[b])

    def test_deterministic_under_seed(self):
        feats, labels, het = _imbalanced(3)
        plan = plan_balancing(labels)
        runs = [smote_balance(feats, labels, het, plan, 2, 5, np.random.default_rng(9))
                for _ in range(2)]
        np.testing.assert_array_equal(runs[0].features, runs[1].features)
        np.testing.assert_array_equal(runs[0].parents, runs[1].parents)

    def test_single_sample_class_is_duplicated(self):
        feats, labels, het = _imbalanced(4, (6, 1))
        plan = plan_balancing(labels)
        with pytest.warns(DegenerateDataWarning):
            out = smote_balance(feats, labels, het, plan, 1, 2, np.random.default_rng(0))
        assert out.duplicated == [2]
        check_balanced_set(out, feats, labels, plan, 1 / 3)

    def test_duplicate_points_are_not_their_own_neighbor(self):
        feats = np.array([[0.0], [0.0], [1.0], [5.0], [6.0], [7.0], [8.0]])
        labels = np.array([2, 2, 2, 1, 1, 1, 1])
        out = smote_balance(feats, labels, np.zeros(7), plan_balancing(labels), 1, 1,
                            np.random.default_rng(0))
        a, b = out.parents[out.synthetic].T
        assert np.all(a != b)

    def test_balanced_input_is_unchanged(self):
        feats, labels, het = _imbalanced(5, (4, 4))
        out = smote_balance(feats, labels, het, plan_balancing(labels), 1, 1,
                            np.random.default_rng(0))
        assert not out.synthetic.any() and out.features.shape == feats.shape
