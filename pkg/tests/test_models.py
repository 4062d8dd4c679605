from pathlib import Path

import numpy as np
import pytest
import scipy.sparse as sp

from bidca.bilevel import ValueFunction, solve_lower
from bidca.data import Dataset, fold_plan, load_libsvm
from bidca.errors import DataError
from bidca.models import lasso, svm
from bidca.models.toys import build_toy, lasso_toy_data
from bidca.verify import small_svm_problem, value_finite_differences

DATA = Path(__file__).resolve().parents[1] / "data"


def dataset(A, b, name="t"):
    return Dataset(np.asarray(b, float), sp.csr_matrix(np.asarray(A, float)), name)


def separable(n_per=4):
    rng = np.random.default_rng(2)
    pos = rng.uniform(0.5, 1.0, (n_per, 2))
    return dataset(np.vstack([pos, -pos]), [1.0] * n_per + [-1.0] * n_per)


@pytest.mark.skipif(not (DATA / "australian_scale").exists(), reason="australian_scale not shipped")
def test_svm_dimensions_on_australian():
    d = load_libsvm(DATA / "australian_scale")
    assert d.n == 14
    p = svm.build_svm_cv(d.subset(np.arange(345)), fold_plan(345, 3, 0))
    assert (p.nx, p.ny, p.n_g) == (15, 45, 84)


def test_svm_lower_objective_single_point():
    d = dataset([[1.0], [1.0], [1.0]], [1.0, 1.0, 1.0])
    p = svm.build_svm_cv(d, fold_plan(3, 3, 0))
    lay = p.meta["layout"]
    z = np.zeros(p.nx + p.ny)
    z[lay.mu] = 1.0
    # every fold trains on two points with margin 0 -> 2 hinge units per fold, 3 folds
    assert p.f.value(z) == pytest.approx(6.0)
    assert p.F1.value(z) == pytest.approx(1.0)


def test_svm_mu_partial_derivative():
    p = small_svm_problem()
    lay = p.meta["layout"]
    z = np.zeros(p.nx + p.ny)
    z[lay.mu] = 2.0
    z[lay.w(0)] = 1.0
    z[lay.w(0)[2:]] = 0.0
    g = p.f.smooth_grad(z)[lay.mu]
    assert g == pytest.approx(-2.0 / (2 * 4.0))
    h = 1e-6
    e = np.zeros_like(z)
    e[lay.mu] = h
    fd = (p.f.value(z + e) - p.f.value(z - e)) / (2 * h)
    assert fd == pytest.approx(g, abs=1e-8)


def test_svm_value_subgradient_against_finite_differences():
    p = small_svm_problem()
    v = ValueFunction(p, 1e-10)
    x = svm.svm_start(p, lam=1.0, wbar=0.3)[0]
    xi = v.subgrad_x(x)
    sol = v.solution(x)
    lay = p.meta["layout"]
    W = sol.y[: lay.T * lay.n].reshape(lay.T, lay.n)
    assert xi[0] == pytest.approx(-np.sum(W * W) / (2 * x[0] ** 2), rel=1e-6)
    h = 1e-5
    for i in range(p.nx):
        e = np.zeros(p.nx)
        e[i] = h
        fd = (v.value_x(x + e) - v.value_x(x - e)) / (2 * h)
        assert fd == pytest.approx(xi[i], abs=1e-3)


def test_svm_validation_error_two_paths_agree():
    p = small_svm_problem()
    x = svm.svm_start(p)[0]
    theta, y = svm.cv_error(p, x)
    assert svm.validation_error(p, y) == pytest.approx(theta, abs=1e-10)


def test_validation_error_examples():
    d = separable()
    p = svm.build_svm_cv(d, fold_plan(d, 2, 0))
    lay = p.meta["layout"]
    y = np.zeros(p.ny)
    for t in range(lay.T):
        y[t * lay.n:(t + 1) * lay.n] = [2.0, 2.0]
    # all margins >= 2 * 1.0 = 2
    assert svm.validation_error(p, y) == 0.0
    assert svm.validation_error(p, np.zeros(p.ny)) == pytest.approx(1.0)


def test_svm_rejects_bad_labels():
    with pytest.raises(DataError):
        svm.build_svm_cv(dataset([[1.0], [2.0]], [0.0, 1.0]), fold_plan(2, 2, 0))


def test_post_process_separates_separable_data():
    d = separable()
    clf = svm.post_process(1e4, np.full(2, 1.5), d)
    margins = d.labels * clf.decision(d.X)
    assert np.all(margins >= 1 - 1e-6)
    assert svm.test_error(clf, d) == 0.0
    assert svm.test_error(clf.flipped(), d) == 1.0


def test_post_process_tiny_box():
    d = separable()
    clf = svm.post_process(1.0, np.full(2, 1e-6), d)
    assert np.all(np.abs(clf.w) <= 1e-6)


def test_post_process_regularizer_coefficient():
    # one feature, two points at +-1: for wbar large the refit solves
    # min coef * w^2 + 2 max(1 - w, 0) with coef = T / (2 (T - 1) mu), so w = 1/coef if coef >= 1
    d = dataset([[1.0], [-1.0]], [1.0, -1.0])
    mu = 0.5
    clf = svm.post_process(mu, 10.0, d, T=3)
    coef = 3.0 / (4.0 * mu)
    assert clf.w[0] == pytest.approx(1.0 / coef, abs=1e-6)


def test_lasso_lower_objective_single_point():
    d = dataset([[1.0], [1.0], [1.0]], [1.0, 1.0, 1.0])
    p = lasso.build_lasso_cv(d, fold_plan(3, 3, 0))
    z = np.zeros(1 + p.ny)
    z[0] = 1.0
    # each fold: two residuals of 1, over lambda = 1
    assert p.f.value(z) == pytest.approx(6.0)


def test_lasso_lambda_partial_derivative():
    d = dataset([[1.0], [0.0], [0.0]], [0.0, 0.0, 0.0])
    p = lasso.build_lasso_cv(d, fold_plan(3, 3, 0))
    z = np.zeros(1 + p.ny)
    z[0] = 2.0
    z[1:] = 1.0
    # residual r = 1 on the row a = 1 in every fold that trains on it (two folds)
    g = p.f.smooth_grad(z)[0]
    assert g == pytest.approx(2 * -1.0 / 4.0)
    h = 1e-6
    e = np.zeros_like(z)
    e[0] = h
    fd = (p.f.value(z + e) - p.f.value(z - e)) / (2 * h)
    assert fd == pytest.approx(g, abs=1e-8)


def test_lasso_perfect_fit_gives_zero_validation_error():
    A = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, -1.0], [0.5, 0.5], [1.0, 2.0]])
    w = np.array([0.7, -0.3])
    d = dataset(A, A @ w)
    p = lasso.build_lasso_cv(d, fold_plan(d, 3, 0))
    y = np.tile(w, 3)
    z = np.concatenate([[1.0], y])
    assert p.F1.value(z) == pytest.approx(0.0, abs=1e-14)
    assert lasso.validation_error(p, y) == pytest.approx(0.0, abs=1e-14)


def test_lasso_value_function_finite_differences():
    ok, worst = value_finite_differences(build_toy("lasso"), np.random.default_rng(0), 10)
    assert ok, worst


def test_lasso_refit_and_mse():
    d = lasso_toy_data()
    w = lasso.refit(1e-3, d)
    # tiny lambda: the data term dominates, so the fit is near least squares
    ls = np.linalg.lstsq(d.X.toarray(), d.labels, rcond=None)[0]
    assert np.allclose(w, ls, atol=1e-2)
    assert lasso.test_mse(w, d) <= 0.2
    assert np.allclose(lasso.refit(1e4, d), 0.0, atol=1e-6)


def test_lasso_two_paths_agree():
    p = build_toy("lasso")
    theta, y = lasso.cv_error(p, lasso.lasso_start(p)[0])
    assert lasso.validation_error(p, y) == pytest.approx(theta, abs=1e-10)
    assert solve_lower(p, [1.0]).value > 0
