import csv
import io
import json
import warnings

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, settings
from hypothesis import strategies as st

from sptransduct import risk_lab
from sptransduct.data_lab import ShiftKind, ShiftSpec, SyntheticSpec
from sptransduct.estimators import EstimatorConfig
from sptransduct.risk_lab import (BoundKind, BoundValue, Design, XStarMode, lasso_lower_bound_shape, mean_se,
                                  monte_carlo_risk, optimal_ridge_lambda, reports_to_csv,
                                  ridge_lower_bound, ridge_optimal_lower_bound, simulate, summarize,
                                  trimmed_dual_norm, trimmed_norm)

ORACLE = EstimatorConfig("Oracle", "oracle")
ZERO = EstimatorConfig("Zero", "zero")
OLS = EstimatorConfig("OLS", "ols")
LASSO = EstimatorConfig("Lasso", "lasso", {"lam": "theory"})

vec = st.integers(1, 10).flatmap(lambda p: st.lists(st.floats(-10, 10, allow_nan=False), min_size=p, max_size=p))


def _dual_by_lp(y, s):
    """max <x, y> over the unit ball of the top-s norm, as an LP in (x, t, u)."""
    p = len(y)
    # variables: x (p), a = |x| bound (p), t, u (p)
    c = np.concatenate([-np.asarray(y), np.zeros(p), [0.0], np.zeros(p)])
    A, b = [], []
    for i in range(p):
        row = np.zeros(3 * p + 1)
        row[i], row[p + i] = 1, -1
        A.append(row), b.append(0)
        row = np.zeros(3 * p + 1)
        row[i], row[p + i] = -1, -1
        A.append(row), b.append(0)
        row = np.zeros(3 * p + 1)  # a_i - t - u_i <= 0
        row[p + i], row[2 * p], row[2 * p + 1 + i] = 1, -1, -1
        A.append(row), b.append(0)
    row = np.zeros(3 * p + 1)
    row[2 * p] = s
    row[2 * p + 1:] = 1
    A.append(row), b.append(1)
    bounds = [(None, None)] * p + [(0, None)] * p + [(0, None)] + [(0, None)] * p
    res = scipy.optimize.linprog(c, A_ub=np.array(A), b_ub=b, bounds=bounds, method="highs")
    return -res.fun


class TestNorms:
    def test_examples(self):
        x = [3.0, -1.0, 2.0, -5.0]
        assert trimmed_norm(x, 0) == 0.0
        assert trimmed_norm(x, 1) == 5.0
        assert trimmed_norm(x, 2) == 8.0
        assert trimmed_norm(x, 4) == 11.0
        assert trimmed_dual_norm(x, 1) == 11.0
        assert trimmed_dual_norm(x, 4) == 5.0
        assert trimmed_dual_norm(x, 3) == pytest.approx(max(11 / 3, 5))

    def test_bad_s(self):
        with pytest.raises(ValueError):
            trimmed_norm([1.0, 2.0], 3)
        with pytest.raises(ValueError):
            trimmed_dual_norm([1.0, 2.0], 0)

    @settings(max_examples=80, deadline=None)
    @given(vec, st.data())
    def test_norm_properties(self, x, data):
        x = np.array(x)
        s = data.draw(st.integers(1, x.size))
        c = data.draw(st.floats(-5, 5))
        y = np.array(data.draw(st.lists(st.floats(-10, 10), min_size=x.size, max_size=x.size)))
        assert trimmed_norm(c * x, s) == pytest.approx(abs(c) * trimmed_norm(x, s), abs=1e-9)
        assert trimmed_norm(x + y, s) <= trimmed_norm(x, s) + trimmed_norm(y, s) + 1e-9
        assert np.abs(x).max() - 1e-12 <= trimmed_norm(x, s) <= np.abs(x).sum() + 1e-12
        # Hoelder pairing with the dual
        assert abs(x @ y) <= trimmed_norm(x, s) * trimmed_dual_norm(y, s) + 1e-8

    @settings(max_examples=40, deadline=None)
    @given(vec, st.data())
    def test_dual_matches_lp(self, y, data):
        s = data.draw(st.integers(1, len(y)))
        assert trimmed_dual_norm(y, s) == pytest.approx(_dual_by_lp(y, s), rel=1e-7, abs=1e-7)


class TestBounds:
    def test_ridge_hand_example(self):
        # lam/n = 7: the shrinkage factor is 1/2
        beta = np.zeros(20)
        beta[0] = 2.0
        x = np.zeros(20)
        x[0] = 1.0
        b = ridge_lower_bound(beta, 1.0, 100, 700.0, x)
        assert b.value == pytest.approx(4 * 25 * 0.25 * 0.01)
        assert b.kind is BoundKind.RIDGE_THM1 and b.in_regime

    def test_ridge_zero_cases(self):
        beta = np.ones(20)
        x = np.zeros(20)
        x[0], x[1] = 1.0, -1.0
        assert ridge_lower_bound(beta, 1.0, 50, 3.0, x).value == 0.0  # orthogonal
        assert ridge_lower_bound(beta, 1.0, 50, 0.0, np.ones(20)).value == 0.0

    def test_out_of_regime_warns(self):
        with pytest.warns(UserWarning):
            b = ridge_lower_bound(np.ones(5), 1.0, 50, 1.0, np.ones(5))
        assert not b.in_regime

    def test_optimal_lambda(self):
        assert optimal_ridge_lambda(200, 2.0) == 100.0
        with pytest.raises(ValueError):
            optimal_ridge_lambda(10, 0.0)

    def test_corollary_hand_example(self):
        beta = np.zeros(20)
        beta[:4] = 1.0  # SNR 4
        b = ridge_optimal_lower_bound(beta, 1.0, 40, beta)
        assert b.value == pytest.approx(400 / (40 * 4) * 4 / 40 / 784)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(20, 60), st.integers(0, 2**32 - 1), st.floats(0.1, 10))
    def test_corollary_below_theorem_at_optimal_lambda(self, p, seed, sigma):
        # with (p/SNR)/n <= 7 the closed form is a lower estimate of the general bound
        r = np.random.default_rng(seed)
        n = int(r.integers(p, 4 * p))
        beta = r.normal(size=p)
        snr = beta @ beta / sigma**2
        if p / (n * snr) > 7:
            return
        x = r.normal(size=p) + beta
        thm = ridge_lower_bound(beta, sigma, n, p / snr, x).value
        cor = ridge_optimal_lower_bound(beta, sigma, n, x).value
        assert cor <= thm * (1 + 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(vec, st.floats(0.01, 10), st.floats(0.1, 10))
    def test_lasso_shape_homogeneous(self, x, lam, c):
        x = np.array(x)
        s = max(1, x.size // 2)
        lo, hi = lasso_lower_bound_shape(x, s, lam)
        assert lo.value == hi.value == pytest.approx(lam**2 * trimmed_norm(x, s) ** 2)
        assert lasso_lower_bound_shape(c * x, s, lam)[0].value == pytest.approx(c**2 * lo.value, rel=1e-9, abs=1e-12)
        assert lasso_lower_bound_shape(x, s, c * lam)[0].value == pytest.approx(c**2 * lo.value, rel=1e-9, abs=1e-12)

    def test_negative_bound_rejected(self):
        with pytest.raises(ValueError):
            BoundValue(BoundKind.RIDGE_THM1, -1.0)


class TestMonteCarlo:
    spec = SyntheticSpec(n=40, p=6, sparsity=3)

    def test_mean_se(self):
        m, se = mean_se([1.0, 2.0, 3.0, 4.0])
        assert m == 2.5
        assert se == pytest.approx(np.std([1, 2, 3, 4], ddof=1) / 2)
        assert np.isnan(mean_se([])[0])

    def test_oracle_has_zero_risk(self):
        rep = monte_carlo_risk(self.spec, ShiftSpec(), ORACLE, replicates=5, seed=1, test_points=3)
        assert rep.risk_mean == pytest.approx(0.0, abs=1e-20)
        assert rep.replicates == 5 and rep.failures == 0

    def test_zero_predictor_fixed_point(self):
        truth = np.array([1.0, -2.0, 0, 0, 0, 3.0])
        x = np.array([0.5, 1.0, 2.0, 0, 0, 1.0])
        rep = monte_carlo_risk(self.spec, ShiftSpec(), ZERO, replicates=4, seed=0, truth=truth, x_star=x)
        assert rep.risk_mean == pytest.approx((x @ truth) ** 2)
        assert rep.risk_se == 0.0
        assert rep.shift == "fixed_x_star"

    def test_ols_matches_inverse_wishart_mean(self):
        # E[x'(X'X)^{-1}x] = |x|^2 / (n - p - 1) for Gaussian rows, raw data
        n, p = 30, 5
        x = np.array([1.0, 0.0, -1.0, 2.0, 0.5])
        truth = np.ones(p)
        rep = monte_carlo_risk(SyntheticSpec(n=n, p=p, sparsity=p), ShiftSpec(), OLS, replicates=3000, seed=5,
                               truth=truth, x_star=x, preprocess="raw")
        expected = x @ x / (n - p - 1)
        assert abs(rep.risk_mean - expected) < 3 * rep.risk_se

    def test_fixed_mode_reuses_points(self):
        truth = np.array([1.0, 1.0, 1.0, 0, 0, 0])
        d = Design(self.spec, ShiftSpec(ShiftKind.MEAN_SHIFT_TOWARD_BETA), XStarMode.FIXED, 2, truth=truth)
        sq = simulate(d, [ZERO], 4, seed=3)
        # the zero predictor's error depends on the test point only
        assert np.all(sq[0] == sq[0, 0])
        fresh = simulate(Design(self.spec, d.shift, XStarMode.FRESH, 2, truth=truth), [ZERO], 4, seed=3)
        assert not np.all(fresh[0] == fresh[0, 0])

    def test_pairing_independent_of_estimator_list(self):
        d = Design(self.spec, ShiftSpec(ShiftKind.COV_SHIFT_RANK_ONE), test_points=3)
        a = simulate(d, [LASSO], 3, seed=9)
        b = simulate(d, [ZERO, OLS, LASSO], 3, seed=9)
        np.testing.assert_array_equal(a[0], b[2])

    def test_deterministic_and_jobs_invariant(self):
        d = Design(self.spec, test_points=2)
        a = simulate(d, [LASSO, OLS], 4, seed=2)
        np.testing.assert_array_equal(a, simulate(d, [LASSO, OLS], 4, seed=2))
        np.testing.assert_array_equal(a, simulate(d, [LASSO, OLS], 4, seed=2, jobs=2))
        assert not np.array_equal(a, simulate(d, [LASSO, OLS], 4, seed=3))

    def test_failures_counted(self, monkeypatch):
        real = risk_lab.fit_estimator
        calls = {"n": 0}

        def flaky(cfg, ctx):
            calls["n"] += 1
            if calls["n"] % 3 == 0:
                raise np.linalg.LinAlgError("singular")
            return real(cfg, ctx)

        monkeypatch.setattr(risk_lab, "fit_estimator", flaky)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            rep = monte_carlo_risk(self.spec, ShiftSpec(), OLS, replicates=9, seed=0)
        assert rep.failures == 3 and rep.replicates == 6
        assert not rep.valid
        assert np.isfinite(rep.risk_mean)

    def test_validation(self):
        with pytest.raises(ValueError):
            monte_carlo_risk(self.spec, ShiftSpec(), OLS, replicates=1)
        with pytest.raises(ValueError):
            Design(self.spec, preprocess="whiten")
        with pytest.raises(ValueError):
            simulate(Design(self.spec), [OLS], 0, seed=0)


class TestExport:
    def test_csv_and_json(self):
        d = Design(SyntheticSpec(n=30, p=5, sparsity=2), test_points=2)
        sq = simulate(d, [ZERO, OLS], 3, seed=4)
        reports = [summarize(sq[i], name, d, 4) for i, name in enumerate(["Zero", "OLS"])]
        rows = list(csv.DictReader(io.StringIO(reports_to_csv(reports))))
        assert [r["estimator"] for r in rows] == ["Zero", "OLS"]
        assert tuple(rows[0]) == risk_lab.CSV_FIELDS
        # floats survive the text round trip exactly
        assert float(rows[1]["risk_mean"]) == reports[1].risk_mean
        payload = json.loads(reports[0].to_json())
        assert payload["valid"] is True and payload["n"] == 30
