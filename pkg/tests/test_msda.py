"""Group-Lasso discriminant solver against dense linear algebra."""
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hqforest.errors import DimensionMismatch, NotConvergedWarning, ZeroDiagonal
from hqforest.msda import (MsdaProblem, group_soft_threshold, kkt_violation,
                           lasso_transform, msda_objective, ridge_transform, solve_msda,
                           tilde_theta)
from oracles import kkt_residual, msda_unpenalised, spd_fixture


class TestSolver:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_unpenalised_solution_is_linear_solve(self, seed):
        cov, delta = spd_fixture(seed)
        res = solve_msda(MsdaProblem(cov, delta, 0.0, tol=1e-10))
        ref = msda_unpenalised(cov, delta)
        assert res.converged
        np.testing.assert_array_equal(res.theta[0], 0.0)
        assert np.linalg.norm(res.theta[1:] - ref) <= 1e-7 * np.linalg.norm(ref)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.sampled_from([0.01, 0.05, 0.3, 1.0]))
    def test_kkt_conditions_hold(self, seed, lam):
        cov, delta = spd_fixture(seed)
        prob = MsdaProblem(cov, delta, lam)
        res = solve_msda(prob)
        assert kkt_residual(cov, delta, res.theta[1:], lam) < 1e-5
        assert kkt_violation(prob, res.theta) == pytest.approx(
            kkt_residual(cov, delta, res.theta[1:], lam), abs=1e-12)

    def test_active_set_reports_nonzero_groups(self):
        cov, delta = spd_fixture(4, n_feat=12, n_clas=3)
        res = solve_msda(MsdaProblem(cov, delta, 0.8))
        nonzero = [h for h in range(12) if np.any(res.theta[:, h] != 0)]
        assert res.active_features == nonzero
        assert 0 < len(nonzero) < 12

    def test_objective_matches_direct_evaluation(self):
        cov, delta = spd_fixture(5, n_feat=4, n_clas=3)
        theta = np.arange(8.0).reshape(2, 4) / 10
        lam = 0.3
        ref = sum(0.5 * t @ cov @ t - d @ t for t, d in zip(theta, delta))
        ref += lam * sum(np.linalg.norm(theta[:, h]) for h in range(4))
        assert msda_objective(MsdaProblem(cov, delta, lam), theta) == pytest.approx(ref)

    def test_penalty_path_shrinks_norm(self):
        cov, delta = spd_fixture(6, n_feat=10, n_clas=4)
        norms = [np.linalg.norm(solve_msda(MsdaProblem(cov, delta, lam)).theta)
                 for lam in (0.0, 0.1, 0.5, 1.0, 3.0)]
        assert all(a >= b - 1e-9 for a, b in zip(norms, norms[1:]))

    def test_tilde_theta_is_exact_coordinate_minimiser(self):
        cov, delta = spd_fixture(7, n_feat=5, n_clas=3)
        prob = MsdaProblem(cov, delta, 0.0)
        theta = np.random.default_rng(0).normal(size=(2, 5))
        t = tilde_theta(prob, theta, 2)
        moved = theta.copy()
        moved[:, 2] = t
        grad = moved @ cov - delta
        np.testing.assert_allclose(grad[:, 2], 0.0, atol=1e-12)

    def test_non_convergence_warns(self):
        cov, delta = spd_fixture(8, n_feat=20, n_clas=3)
        with pytest.warns(NotConvergedWarning):
            res = solve_msda(MsdaProblem(cov, delta, 0.0, max_iters=1, tol=1e-14))
        assert not res.converged and res.iterations_used == 1

    def test_zero_diagonal_is_jittered(self):
        cov = np.diag([1.0, 0.0, 2.0])
        prob = MsdaProblem(cov, np.array([[1.0, 0.0, 1.0]]), 0.1)
        assert prob.within_cov[1, 1] > 0
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            res = solve_msda(prob)
        assert res.theta[1, 1] == 0.0

    def test_tilde_theta_rejects_zero_diagonal(self):
        prob = MsdaProblem(np.eye(2), np.ones((1, 2)), 0.0)
        prob.within_cov[0, 0] = 0.0
        with pytest.raises(ZeroDiagonal):
            tilde_theta(prob, np.zeros((1, 2)), 0)

    def test_dimension_checks(self):
        with pytest.raises(DimensionMismatch):
            MsdaProblem(np.eye(3), np.ones((1, 2)), 0.1)
        with pytest.raises(DimensionMismatch):
            MsdaProblem(np.ones((2, 3)), np.ones((1, 3)), 0.1)
        with pytest.raises(ValueError):
            MsdaProblem(np.eye(2), np.ones((1, 2)), -1.0)


class TestTransforms:
    def test_group_soft_threshold(self):
        np.testing.assert_array_equal(group_soft_threshold([3.0, 4.0], 2.5), [1.5, 2.0])
        np.testing.assert_array_equal(group_soft_threshold([3.0, 4.0], 5.0), [0.0, 0.0])
        np.testing.assert_array_equal(group_soft_threshold([0.0, 0.0], 1.0), [0.0, 0.0])
        np.testing.assert_array_equal(group_soft_threshold([3.0, 4.0], 0.0), [3.0, 4.0])

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(0, 20))
    def test_group_soft_threshold_norm(self, vec, lam):
        out = group_soft_threshold(vec, lam)
        n = np.linalg.norm(vec)
        assert np.linalg.norm(out) == pytest.approx(max(0.0, n - lam), abs=1e-9)

    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=6), st.floats(0, 20))
    def test_lasso_is_elementwise_soft_threshold(self, vec, lam):
        out = lasso_transform(vec, lam)
        for b, o in zip(vec, out):
            assert abs(o) <= abs(b)
            assert o == 0.0 or np.sign(o) == np.sign(b)
            assert o == 0.0 if abs(b) <= lam else abs(abs(b) - abs(o) - lam) < 1e-12

    def test_ridge_handles_zero_lambda_and_rejects_negative_variance(self):
        np.testing.assert_array_equal(ridge_transform([1.0, 2.0], [0.0, 1.0], 0.0), [1.0, 2.0])
        with pytest.raises(ValueError):
            ridge_transform([1.0], [-1.0], 1.0)
        with pytest.raises(ValueError):
            lasso_transform([1.0], -1.0)
