import numpy as np
import pytest
import scipy.sparse as sp
from numpy.testing import assert_allclose

from nftindex.errors import RankDeficientError, ValidationError
from nftindex.huber import HuberIRLS, robust_scale


def make_problem(n=2000, p=5, sigma=0.1, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    beta = rng.uniform(-2, 2, p)
    intercept = 0.7
    y = X @ beta + intercept + sigma * rng.standard_normal(n)
    return X, y, beta, intercept


def ols(X, y):
    Xd = np.hstack([X, np.ones((len(y), 1))])
    coef, *_ = np.linalg.lstsq(Xd, y, rcond=None)
    return coef[:-1], coef[-1]


def test_noise_free_exact_recovery():
    X, y, beta, intercept = make_problem(sigma=0.0)
    est = HuberIRLS().fit(X, y)
    assert_allclose(est.coef_, beta, atol=1e-10)
    assert est.intercept_ == pytest.approx(intercept, abs=1e-10)
    assert est.converged_


def test_huge_delta_matches_ols():
    X, y, *_ = make_problem(sigma=0.5, seed=3)
    est = HuberIRLS(delta=1e8).fit(X, y)
    coef, intercept = ols(X, y)
    assert_allclose(est.coef_, coef, atol=1e-6)
    assert est.intercept_ == pytest.approx(intercept, abs=1e-6)


def test_clean_gaussian_close_to_ols():
    X, y, *_ = make_problem(n=20000, sigma=0.1, seed=5)
    est = HuberIRLS().fit(X, y)
    coef, intercept = ols(X, y)
    assert np.max(np.abs(est.coef_ - coef)) <= 1e-3
    assert abs(est.intercept_ - intercept) <= 1e-3


def test_outlier_robustness_beats_ols():
    X, y, beta, _ = make_problem(n=4000, sigma=0.1, seed=11)
    rng = np.random.default_rng(99)
    bad = rng.choice(len(y), size=len(y) // 20, replace=False)
    y = y.copy()
    y[bad] += 10.0
    est = HuberIRLS().fit(X, y)
    coef, _ = ols(X, y)
    err_huber = np.linalg.norm(est.coef_ - beta)
    err_ols = np.linalg.norm(coef - beta)
    assert err_huber < err_ols


def test_scale_estimates_noise_level():
    X, y, *_ = make_problem(n=30000, sigma=0.3, seed=21)
    est = HuberIRLS().fit(X, y)
    assert est.scale_ == pytest.approx(0.3, abs=0.02)


def test_sparse_matches_dense():
    X, y, *_ = make_problem(n=500, sigma=0.2, seed=1)
    dense = HuberIRLS().fit(X, y)
    sparse = HuberIRLS().fit(sp.csr_matrix(X), y)
    assert_allclose(dense.coef_, sparse.coef_, rtol=1e-12)
    assert dense.intercept_ == pytest.approx(sparse.intercept_, rel=1e-12)


def test_rank_deficient_names_columns():
    rng = np.random.default_rng(0)
    X = rng.standard_normal((100, 3))
    X = np.hstack([X, X[:, [1]]])  # duplicate column 1 as column 3
    y = rng.standard_normal(100)
    with pytest.raises(RankDeficientError) as err:
        HuberIRLS().fit(X, y)
    assert err.value.columns  # at least one collinear column named
    assert any(c in (1, 3) for c in err.value.columns)


def test_predict_round_trip():
    X, y, *_ = make_problem(sigma=0.0, seed=2)
    est = HuberIRLS().fit(X, y)
    assert_allclose(est.predict(X), y, atol=1e-9)
    with pytest.raises(ValidationError):
        est.predict(X[:, :2])


def test_validation_errors():
    X, y, *_ = make_problem(n=50)
    with pytest.raises(ValidationError):
        HuberIRLS(delta=0.0).fit(X, y)
    with pytest.raises(ValidationError):
        HuberIRLS(tol=-1.0).fit(X, y)
    with pytest.raises(ValidationError):
        HuberIRLS().fit(X[:3], y[:3])  # fewer rows than columns


def test_nonconvergence_flag():
    X, y, *_ = make_problem(n=4000, sigma=1.0, seed=13)
    rng = np.random.default_rng(5)
    y = y + np.where(rng.random(len(y)) < 0.3, 20.0, 0.0)
    est = HuberIRLS(max_iter=2).fit(X, y)
    assert est.n_iter_ == 2
    assert not est.converged_


def test_robust_scale_gaussian_consistency():
    rng = np.random.default_rng(8)
    x = rng.normal(0, 2.0, 200000)
    assert robust_scale(x) == pytest.approx(2.0, rel=0.02)


def test_median_residual_near_zero():
    X, y, *_ = make_problem(n=20000, sigma=0.3, seed=17)
    est = HuberIRLS().fit(X, y)
    assert abs(est.residual_median_) <= 3 * 0.3 / np.sqrt(len(y))
