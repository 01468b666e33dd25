"""Node discriminant: score algebra, threshold search and QDA."""
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from hqforest.errors import DegenerateScoresWarning, DimensionMismatch
from hqforest.discriminant import (assign_with_offsets, fit_discriminant, lda_scores,
                                   optimize_thresholds, project, qda_classify,
                                   threshold_grids)
from oracles import partition_gini_by_pair_counting


def _blobs(seed, n_per=(30, 30, 30), p=3, spread=2.0):
    rng = np.random.default_rng(seed)
    feats, labels = [], []
    for c, n in enumerate(n_per, start=1):
        centre = np.zeros(p)
        centre[(c - 1) % p] = spread * c
        feats.append(rng.normal(size=(n, p)) + centre)
        labels += [c] * n
    return np.vstack(feats), np.array(labels)


def _oracle_gini(scores, offsets, labels):
    k = scores.shape[1]
    subsets = [[] for _ in range(k)]
    for row, lab in zip(scores, labels):
        shifted = [row[0]] + [row[c] - offsets[c - 1] for c in range(1, k)]
        subsets[int(np.argmax(shifted))].append(int(lab))
    return float(partition_gini_by_pair_counting(subsets))


class TestThresholdSearch:
    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.integers(-20, 20), st.integers(1, 3)), min_size=2, max_size=25))
    def test_two_class_search_is_exhaustive(self, rows):
        margins = np.array([float(m) for m, _ in rows])
        labels = np.array([lab for _, lab in rows])
        scores = np.column_stack([np.zeros_like(margins), margins])
        if np.all(margins == margins[0]):
            return
        tau, g = optimize_thresholds(scores, labels)
        cuts = np.unique(margins)
        candidates = np.concatenate([[cuts[0] - 1], (cuts[1:] + cuts[:-1]) / 2, [cuts[-1]]])
        best = min(_oracle_gini(scores, [t], labels) for t in candidates)
        assert g == pytest.approx(best, abs=1e-12)
        assert g == pytest.approx(_oracle_gini(scores, tau, labels), abs=1e-12)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000))
    def test_three_class_search_finds_grid_minimum(self, seed):
        rng = np.random.default_rng(seed)
        n = 30
        scores = np.column_stack([np.zeros(n), rng.normal(size=(n, 2))])
        labels = rng.integers(1, 4, n)
        grids = threshold_grids(scores, n_grid=6)
        tau, g = optimize_thresholds(scores, labels, n_grid=6)
        best = min(_oracle_gini(scores, t, labels) for t in itertools.product(*grids))
        assert g == pytest.approx(best, abs=1e-12)
        assert g == pytest.approx(_oracle_gini(scores, tau, labels), abs=1e-12)

    def test_coordinate_search_improves_on_zero(self):
        feats, labels = _blobs(3, n_per=(20,) * 5, p=5, spread=1.0)
        scores = np.column_stack([np.zeros(len(labels)), feats[:, 1:]])
        scores = np.column_stack([scores, feats[:, :1]])
        tau, g, counts = optimize_thresholds(scores, labels, return_counts=True)
        assert tau.shape == (5,)
        assert g <= _oracle_gini(scores, np.zeros(5), labels) + 1e-12
        assert g == pytest.approx(_oracle_gini(scores, tau, labels), abs=1e-12)
        assert counts.sum() == len(labels)

    def test_ties_prefer_offsets_near_zero(self):
        scores = np.array([[0.0, -2.0], [0.0, -1.0], [0.0, 1.0], [0.0, 2.0]])
        tau, g = optimize_thresholds(scores, [1, 1, 2, 2])
        assert g == 0.0 and tau[0] == 0.0

    def test_identical_scores_warn(self):
        with pytest.warns(DegenerateScoresWarning):
            tau, _ = optimize_thresholds(np.zeros((4, 3)), [1, 2, 3, 1])
        np.testing.assert_array_equal(tau, 0.0)

    def test_single_column(self):
        tau, g = optimize_thresholds(np.zeros((4, 1)), [1, 1, 2, 2])
        assert tau.size == 0 and g == 0.5

    def test_assignment_breaks_ties_to_first_class(self):
        idx = assign_with_offsets(np.array([[0.0, 0.0, 0.0], [0.0, 1.0, 1.0]]), [0.0, 0.0])
        np.testing.assert_array_equal(idx, [0, 1])


class TestFit:
    def test_separable_blobs_reach_zero_impurity(self):
        feats, labels = _blobs(0, spread=8.0)
        disc, g, counts = fit_discriminant(feats, labels, lam=0.01)
        assert g == 0.0
        np.testing.assert_array_equal(disc.classify(feats), labels)
        assert disc.classes == [1, 2, 3] and disc.flags == []

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 10_000))
    def test_unpenalised_margins_agree_with_lda_scores(self, seed):
        feats, labels = _blobs(seed, spread=1.0)
        disc, _, _ = fit_discriminant(feats, labels, lam=0.0)
        lda = lda_scores(feats, disc)
        np.testing.assert_allclose(lda[:, 1:] - lda[:, :1], disc.margins(feats)[:, 1:],
                                   atol=1e-8)

    def test_classes_keep_their_labels(self):
        feats, labels = _blobs(1, n_per=(25, 25), spread=6.0)
        labels = np.where(labels == 1, 2, 4)
        disc, g, _ = fit_discriminant(feats, labels, lam=0.1)
        assert disc.classes == [2, 4]
        assert set(disc.classify(feats)) <= {2, 4}

    def test_heavy_penalty_zeroes_directions(self):
        feats, labels = _blobs(2, spread=1.0)
        disc, _, _ = fit_discriminant(feats, labels, lam=1e6)
        np.testing.assert_array_equal(disc.theta, 0.0)
        assert disc.selected_indices == []

    def test_single_class_node(self):
        disc, g, counts = fit_discriminant(np.ones((3, 2)), [2, 2, 2], lam=0.1)
        assert g == 0.0 and disc.classes == [2]
        np.testing.assert_array_equal(disc.classify(np.zeros((2, 2))), [2, 2])

    def test_too_few_samples_fall_back_to_identity(self):
        disc, _, _ = fit_discriminant(np.array([[0.0, 0.0], [1.0, 1.0]]), [1, 2], lam=0.0)
        assert "identity_covariance" in disc.flags
        np.testing.assert_array_equal(disc.classify([[0.0, 0.0], [1.0, 1.0]]), [1, 2])

    def test_dimension_checks(self):
        feats, labels = _blobs(4)
        disc, _, _ = fit_discriminant(feats, labels, lam=0.1)
        with pytest.raises(DimensionMismatch):
            disc.margins(np.ones((2, 5)))
        with pytest.raises(DimensionMismatch):
            project(np.ones((2, 5)), disc.betas)


class TestQda:
    def test_matches_gaussian_log_density(self):
        rng = np.random.default_rng(0)
        means = [np.zeros(2), np.array([2.0, 0.0]), np.array([0.0, 3.0])]
        covs = [np.eye(2), np.array([[2.0, 0.5], [0.5, 1.0]]), 0.5 * np.eye(2)]
        priors = [0.5, 0.3, 0.2]
        pts = rng.normal(size=(200, 2)) * 2
        ref = np.argmax(np.column_stack([
            np.log(p) + multivariate_normal(m, c).logpdf(pts)
            for m, c, p in zip(means, covs, priors)]), axis=1) + 1
        np.testing.assert_array_equal(qda_classify(pts, means, covs, priors), ref)
        assert qda_classify(pts[0], means, covs, priors, classes=[5, 6, 7]) == ref[0] + 4

    def test_singular_covariance_is_regularised(self):
        out = qda_classify([[0.0, 0.0]], [np.zeros(2), np.ones(2)],
                           [np.zeros((2, 2)), np.eye(2)], [0.5, 0.5])
        assert out[0] in (1, 2)
