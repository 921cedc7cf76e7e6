import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import lasso_projected_gradient, ridge_direct
from sptransduct import base_regress as br
from sptransduct import kernels
from sptransduct._accel import get_backend, set_backend, use_backend
from sptransduct.data_lab import StandardizedDataset, standardize


def _problem(rng, n, p, s=3):
    X = rng.normal(size=(n, p))
    beta = np.zeros(p)
    beta[:s] = rng.normal(size=s)
    return X, X @ beta + rng.normal(size=n)


class TestBackends:
    def test_switch_and_restore(self):
        before = get_backend()
        with use_backend("numpy"):
            assert get_backend() == "numpy"
        assert get_backend() == before

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            set_backend("fortran")

    def test_kernels_agree_across_backends(self, rng):
        X, y = _problem(rng, 40, 15)
        G, c = X.T @ X / 40, X.T @ y / 40
        out = []
        for name in ("numpy", "numba"):
            with use_backend(name):
                b = np.zeros(15)
                kernels.lasso_cd_gram(G, c, 0.1, 0.05, b, 10_000, 1e-12, 1e-10)
                out.append(b)
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)


class TestKernels:
    @pytest.mark.parametrize("z,t,expected", [(3.0, 1.0, 2.0), (-3.0, 1.0, -2.0), (0.5, 1.0, 0.0),
                                              (1.0, 1.0, 0.0), (-0.2, 0.0, -0.2)])
    def test_soft_threshold(self, backend, z, t, expected):
        assert kernels.soft_threshold(z, t) == expected

    def test_kkt_gap_zero_at_optimum(self, backend, rng):
        X, y = _problem(rng, 30, 8)
        G, c = X.T @ X / 30, X.T @ y / 30
        b = np.zeros(8)
        kernels.lasso_cd_gram(G, c, 0.2, 0.0, b, 100_000, 0.0, 1e-13)
        assert kernels.gram_kkt_gap(G, c, b, 0.2, 0.0) < 1e-12

    def test_one_dimensional_closed_form(self, backend):
        # 0.5 g b^2 - c b + l1 |b| + 0.5 l2 b^2  ->  b = S(c, l1) / (g + l2)
        G = np.array([[2.0]])
        for c, l1, l2 in [(3.0, 1.0, 0.5), (-3.0, 1.0, 0.0), (0.4, 1.0, 2.0)]:
            b = np.zeros(1)
            kernels.lasso_cd_gram(G, np.array([c]), l1, l2, b, 100, 1e-14, 1e-14)
            expected = np.sign(c) * max(abs(c) - l1, 0) / (2.0 + l2)
            assert b[0] == pytest.approx(expected, abs=1e-15)


class TestClosedForms:
    def test_ols_matches_normal_equations(self, rng):
        X, y = _problem(rng, 50, 6)
        d = StandardizedDataset.identity(X, y)
        np.testing.assert_allclose(br.fit_ols(d).coefficients, np.linalg.solve(X.T @ X, X.T @ y), atol=1e-10)

    def test_ols_minimum_norm_when_wide(self, rng):
        X, y = _problem(rng, 5, 12)
        b = br.fit_ols(StandardizedDataset.identity(X, y)).coefficients
        np.testing.assert_allclose(b, np.linalg.pinv(X) @ y, atol=1e-10)

    @pytest.mark.parametrize("n,p", [(40, 10), (10, 40)])
    def test_ridge_primal_and_dual(self, rng, n, p):
        X, y = _problem(rng, n, p)
        for lam in (1e-3, 1.0, 1e3):
            b = br.fit_ridge(StandardizedDataset.identity(X, y), lam).coefficients
            np.testing.assert_allclose(b, ridge_direct(X, y, lam), rtol=1e-8, atol=1e-10)

    def test_ridge_zero_lambda_is_ols(self, rng):
        X, y = _problem(rng, 30, 5)
        d = StandardizedDataset.identity(X, y)
        np.testing.assert_allclose(br.fit_ridge(d, 0.0).coefficients, br.fit_ols(d).coefficients, atol=1e-10)

    def test_ridge_negative_lambda(self, rng):
        X, y = _problem(rng, 10, 3)
        with pytest.raises(ValueError):
            br.fit_ridge(StandardizedDataset.identity(X, y), -1.0)

    def test_prediction_adds_intercept_on_raw_scale(self, rng):
        X, y = _problem(rng, 60, 4)
        X = X * 3 + 2
        d = standardize(X, y + 7)
        m = br.fit_ridge(d, 0.5)
        x = rng.normal(size=4)
        assert br.predict(m, x) == pytest.approx(d.transform(x) @ m.coefficients + d.response_mean)
        with pytest.raises(ValueError):
            br.predict(m, np.ones(5))


class TestLasso:
    def test_matches_projected_gradient(self, backend, rng):
        for _ in range(5):
            X, y = _problem(rng, 12, 6)
            lam = 0.3 * np.abs(X.T @ y / 12).max()
            ref, _ = lasso_projected_gradient(X, y, lam)
            m = br.fit_lasso(StandardizedDataset.identity(X, y), lam)
            np.testing.assert_allclose(m.coefficients, ref, atol=1e-6)
            assert m.solver_report.converged
            assert m.solver_report.final_gap <= br.KKT_TOL

    def test_zero_above_lambda_max(self, rng):
        X, y = _problem(rng, 20, 5)
        lam_max = np.abs(X.T @ y / 20).max()
        assert not br.fit_lasso(StandardizedDataset.identity(X, y), lam_max * 1.0001).coefficients.any()
        assert br.fit_lasso(StandardizedDataset.identity(X, y), lam_max * 0.9).coefficients.any()

    def test_elastic_ratio_one_is_lasso(self, rng):
        X, y = _problem(rng, 30, 8)
        d = StandardizedDataset.identity(X, y)
        np.testing.assert_array_equal(br.fit_elastic(d, 0.1, 1.0).coefficients, br.fit_lasso(d, 0.1).coefficients)

    def test_elastic_kkt(self, rng):
        X, y = _problem(rng, 30, 8)
        m = br.fit_elastic(StandardizedDataset.identity(X, y), 0.2, 0.5)
        G, c = X.T @ X / 30, X.T @ y / 30
        assert kernels.gram_kkt_gap(G, c, np.array(m.coefficients), 0.1, 0.1) < 1e-8

    def test_invalid_parameters(self, rng):
        d = StandardizedDataset.identity(*_problem(rng, 10, 3))
        for bad in (lambda: br.fit_lasso(d, 0.0), lambda: br.fit_elastic(d, 0.1, 0.0),
                    lambda: br.fit_elastic(d, 0.1, 1.5)):
            with pytest.raises(ValueError):
                bad()

    def test_nonconvergence_is_reported(self, rng):
        X, y = _problem(rng, 30, 10)
        G, c = X.T @ X / 30, X.T @ y / 30
        with pytest.raises(br.FitError):
            br.penalized_from_gram(G, c, 1e-4, 0.0, max_sweeps=1, tol_change=0.0, tol_kkt=1e-14)
        _, rep = br.penalized_from_gram(G, c, 1e-4, 0.0, max_sweeps=1, tol_change=0.0, tol_kkt=1e-14,
                                        strict=False)
        assert not rep.converged

    def test_model_json(self, rng):
        m = br.fit_lasso(StandardizedDataset.identity(*_problem(rng, 20, 4)), 0.1)
        d = json.loads(m.to_json())
        assert set(d) == {"coefficients", "intercept", "regularizer", "solver_report"}
        assert d["regularizer"]["kind"] == "lasso"
        assert "final_duality_or_kkt_gap" in d["solver_report"]

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
    def test_kkt_property(self, seed, frac):
        r = np.random.default_rng(seed)
        X, y = _problem(r, 15, 7)
        lam = frac * np.abs(X.T @ y / 15).max()
        b = br.fit_lasso(StandardizedDataset.identity(X, y), lam).coefficients
        assert kernels.gram_kkt_gap(X.T @ X / 15, X.T @ y / 15, np.array(b), lam, 0.0) <= 1e-8


class TestPresets:
    def test_theory_lambda(self):
        assert br.theory_lasso_lambda(100, 50) == pytest.approx(4 * np.sqrt(np.log(50) / 100))

    def test_conservative_lambda(self):
        assert br.conservative_lasso_lambda(1000, 200, 20) == pytest.approx(
            80 * np.sqrt(np.log(2 * np.e * 10) / 1000))


class TestCrossValidation:
    def test_folds_partition(self):
        folds = br.kfold_indices(23, 5, seed=1)
        allidx = np.concatenate(folds)
        assert sorted(allidx.tolist()) == list(range(23))
        sizes = [f.size for f in folds]
        assert max(sizes) - min(sizes) <= 1
        with pytest.raises(ValueError):
            br.kfold_indices(3, 5, seed=1)

    def test_plan_validation(self):
        with pytest.raises(ValueError):
            br.CvPlan(grid=(1.0, 0.5))
        with pytest.raises(ValueError):
            br.CvPlan(grid=(0.0, 1.0))
        with pytest.raises(ValueError):
            br.CvPlan(folds=1)
        with pytest.raises(ValueError):
            br.CvPlan(l1_ratio_grid=(0.0,))

    def test_ridge_loo_shortcut_matches_brute_force(self, rng):
        X, y = _problem(rng, 15, 4)
        grid = np.array([0.1, 1.0, 10.0])
        fast = br.ridge_loo_scores(X, y, grid)
        slow = []
        for lam in grid:
            errs = []
            for i in range(15):
                keep = np.arange(15) != i
                errs.append((y[i] - X[i] @ ridge_direct(X[keep], y[keep], lam)) ** 2)
            slow.append(np.mean(errs))
        np.testing.assert_allclose(fast, slow, rtol=1e-10)

    def test_lasso_cv_picks_grid_minimum(self, rng):
        X, y = _problem(rng, 60, 10)
        d = StandardizedDataset.identity(X, y)
        grid = np.logspace(-3, 0, 8)
        plan = br.CvPlan(grid=tuple(grid), folds=4)
        m = br.cross_validate(d, "lasso", plan, seed=5)
        # brute-force the same folds with cold starts
        folds = br.kfold_indices(60, 4, seed=5)
        scores = []
        for lam in grid:
            tot = 0.0
            for idx in folds:
                keep = np.ones(60, bool)
                keep[idx] = False
                b = br.fit_lasso(StandardizedDataset.identity(X[keep], y[keep]), lam).coefficients
                tot += np.mean((y[idx] - X[idx] @ b) ** 2)
            scores.append(tot / 4)
        assert m.regularizer.lam == pytest.approx(grid[int(np.argmin(scores))])

    def test_ties_prefer_larger_lambda(self):
        assert br._pick(np.array([1.0, 0.5, 0.5]), np.array([0.1, 0.2, 0.3])) == 2

    def test_elastic_cv_runs_and_is_deterministic(self, rng):
        d = StandardizedDataset.identity(*_problem(rng, 40, 6))
        plan = br.CvPlan(grid=tuple(np.logspace(-2, 0, 5)), folds=3, l1_ratio_grid=(0.5, 1.0))
        a = br.cross_validate(d, "elastic", plan, seed=2)
        b = br.cross_validate(d, "elastic", plan, seed=2)
        np.testing.assert_array_equal(a.coefficients, b.coefficients)
        assert a.regularizer.l1_ratio in (0.5, 1.0)

    def test_ridge_cv_kfold(self, rng):
        d = StandardizedDataset.identity(*_problem(rng, 40, 6))
        m = br.cross_validate(d, "ridge", br.CvPlan(grid=(0.1, 1.0, 10.0), folds=4), seed=0)
        assert m.regularizer.lam in (0.1, 1.0, 10.0)


class TestFamilies:
    def test_fixed_family_needs_lambda(self):
        with pytest.raises(ValueError):
            br.RegressorFamily(br.FamilyKind.LASSO)
        with pytest.raises(ValueError):
            br.RegressorFamily(br.FamilyKind.CUSTOM)

    def test_gram_path_matches_direct_fit(self, rng):
        X, y = _problem(rng, 30, 6)
        d = StandardizedDataset.identity(X, y)
        for fam, direct in [(br.RegressorFamily("ridge", lam=2.0), br.fit_ridge(d, 2.0)),
                            (br.RegressorFamily("lasso", lam=0.1), br.fit_lasso(d, 0.1)),
                            (br.RegressorFamily("elastic", lam=0.1, l1_ratio=0.5), br.fit_elastic(d, 0.1, 0.5))]:
            np.testing.assert_allclose(fam.fit(X, y).coef, direct.coefficients, atol=1e-8)

    def test_zero_family(self, rng):
        X, y = _problem(rng, 10, 3)
        assert not br.RegressorFamily("zero").fit(X, y)(X).any()

    def test_custom_family_uses_fit_predict(self, rng):
        class Mean:
            def fit(self, X, y):
                self.m = y.mean()

            def predict(self, X):
                return np.full(X.shape[0], self.m)

        X, y = _problem(rng, 10, 3)
        pred = br.RegressorFamily("custom", factory=Mean).fit(X, y)(X)
        np.testing.assert_allclose(pred, y.mean())
