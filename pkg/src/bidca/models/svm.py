"""Cross-validated linear SVM with feature-wise box bounds as a bilevel program.

Upper variable x = (mu, wbar) where mu = 1/lambda scales the regularizer and
wbar bounds |w| coordinatewise.  Lower variable y = (w^1, ..., w^T, c) holds
one classifier per training fold.  The lower objective is

    sum_t |w^t|^2 / (2 mu) + sum_t sum_{j in trn_t} hinge(b_j (a_j'w^t - c_t))

and the upper objective is the mean validation hinge loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..bilevel import BilevelProblem, solve_lower
from ..convex import (Box, MaxAffineTerms, PerspectiveSquares, Quadratic,
                      StructuredConvex)
from ..data import Dataset, FoldPlan
from ..errors import DataError
from ..ipm import ip_solve
from ..slack import ProgramBuilder


@dataclass(frozen=True)
class SvmBounds:
    lam_lb: float = 1e-4
    lam_ub: float = 1e4
    wbar_lb: float = 1e-6
    wbar_ub: float = 1.5

    def __post_init__(self):
        if not 0 < self.lam_lb < self.lam_ub:
            raise ValueError("need 0 < lam_lb < lam_ub")
        if not 0 < self.wbar_lb <= self.wbar_ub:
            raise ValueError("need 0 < wbar_lb <= wbar_ub")


@dataclass(frozen=True)
class Classifier:
    w: np.ndarray
    c: float

    def decision(self, X: sp.spmatrix) -> np.ndarray:
        return X @ self.w - self.c

    def predict(self, X: sp.spmatrix) -> np.ndarray:
        return np.where(self.decision(X) >= 0, 1.0, -1.0)

    def flipped(self) -> "Classifier":
        return Classifier(-self.w, -self.c)


@dataclass(frozen=True)
class SvmLayout:
    n: int
    T: int

    @property
    def nx(self) -> int:
        return 1 + self.n

    @property
    def ny(self) -> int:
        return (self.n + 1) * self.T

    def w(self, t: int) -> np.ndarray:
        """Indices of w^t in z = (x, y)."""
        return self.nx + t * self.n + np.arange(self.n)

    def c(self, t: int) -> int:
        return self.nx + self.T * self.n + t

    mu = 0

    @property
    def wbar(self) -> np.ndarray:
        return 1 + np.arange(self.n)


def _check_labels(data: Dataset) -> None:
    if not set(np.unique(data.labels)) <= {-1.0, 1.0}:
        raise DataError("SVM labels must be -1/+1")


def _hinge_rows(data: Dataset, idx: np.ndarray, lay: SvmLayout, t: int, dim: int):
    """Rows of 1 - b_j (a_j'w^t - c_t) as (matrix, offset)."""
    A = data.X[idx]
    b = data.labels[idx]
    coo = sp.coo_matrix(A)
    rows = np.concatenate([coo.row, np.arange(idx.size)])
    cols = np.concatenate([lay.w(t)[coo.col], np.full(idx.size, lay.c(t))])
    vals = np.concatenate([-b[coo.row] * coo.data, b])
    return sp.csr_matrix((vals, (rows, cols)), shape=(idx.size, dim)), np.ones(idx.size)


def build_svm_cv(data: Dataset, plan: FoldPlan, bounds: SvmBounds = SvmBounds()) -> BilevelProblem:
    """Bilevel program for T-fold cross-validated SVM on ``data``."""
    _check_labels(data)
    if plan.assignment.size != data.size:
        raise ValueError("fold plan does not match the dataset")
    T, n = plan.T, data.n
    if T < 2:
        raise ValueError("need at least two folds")
    lay = SvmLayout(n, T)
    dim = lay.nx + lay.ny
    up_rows, up_off, up_w = [], [], []
    lo_rows, lo_off = [], []
    for t in range(T):
        val, trn = plan.val(t), plan.trn(t)
        if val.size == 0 or trn.size == 0:
            raise ValueError(f"fold {t} is empty")
        R, o = _hinge_rows(data, val, lay, t, dim)
        up_rows.append(R), up_off.append(o), up_w.append(np.full(val.size, 1.0 / (T * val.size)))
        R, o = _hinge_rows(data, trn, lay, t, dim)
        lo_rows.append(R), lo_off.append(o)
    F1 = StructuredConvex(dim, terms=MaxAffineTerms.hinges(
        sp.vstack(up_rows), np.concatenate(up_off), np.concatenate(up_w)))
    w_all = np.concatenate([lay.w(t) for t in range(T)])
    sel = sp.csr_matrix((np.ones(w_all.size), (np.arange(w_all.size), w_all)),
                        shape=(w_all.size, dim))
    f = StructuredConvex(dim, smooth=PerspectiveSquares(sel, None, lay.mu, 0.5),
                         terms=MaxAffineTerms.hinges(sp.vstack(lo_rows), np.concatenate(lo_off), 1.0))
    # g_t = (-wbar - w^t ; w^t - wbar) <= 0
    I = sp.identity(n, format="csr")
    Gx_blocks, Gy_blocks = [], []
    for t in range(T):
        gx = sp.hstack([sp.csr_matrix((n, 1)), -I])
        gy = sp.lil_matrix((2 * n, lay.ny))
        for i in range(n):
            gy[i, t * n + i] = -1.0
            gy[n + i, t * n + i] = 1.0
        Gx_blocks.append(sp.vstack([gx, gx]))
        Gy_blocks.append(gy.tocsr())
    X = Box(np.concatenate([[1.0 / bounds.lam_ub], np.full(n, bounds.wbar_lb)]),
            np.concatenate([[1.0 / bounds.lam_lb], np.full(n, bounds.wbar_ub)]))
    Y = Box.free(lay.ny)
    return BilevelProblem(lay.nx, lay.ny, F1, StructuredConvex.zero(dim), f, X, Y,
                          sp.vstack(Gx_blocks).tocsr(), sp.vstack(Gy_blocks).tocsr(),
                          np.zeros(2 * n * T), partial_formula="x-separable",
                          name=f"svm-cv:{data.name}",
                          meta={"layout": lay, "plan": plan, "bounds": bounds, "data": data})


def svm_start(p: BilevelProblem, lam: float = 1.0, wbar: float = 0.1):
    """Default start: lambda = 1, wbar = 0.1 * 1, everything else zero."""
    lay: SvmLayout = p.meta["layout"]
    x0 = np.concatenate([[1.0 / lam], np.full(lay.n, wbar)])
    return p.X.project(x0), np.zeros(lay.ny)


def hyperparameters(p: BilevelProblem, x) -> tuple[float, np.ndarray]:
    lay: SvmLayout = p.meta["layout"]
    return float(x[lay.mu]), np.asarray(x[lay.wbar], dtype=float)


def cv_error(p: BilevelProblem, x) -> tuple[float, np.ndarray]:
    """Re-solve the lower level at x and return (Theta, y)."""
    sol = solve_lower(p, x)
    return p.F1.value(np.concatenate([sol.x, sol.y])), sol.y


def validation_error(p: BilevelProblem, y) -> float:
    """Theta computed directly from fold classifiers (second code path)."""
    lay: SvmLayout = p.meta["layout"]
    data: Dataset = p.meta.get("data")
    plan: FoldPlan = p.meta["plan"]
    total = 0.0
    for t in range(lay.T):
        w = y[t * lay.n:(t + 1) * lay.n]
        c = y[lay.T * lay.n + t]
        val = plan.val(t)
        margin = data.labels[val] * (data.X[val] @ w - c)
        total += np.maximum(1.0 - margin, 0.0).mean()
    return float(total / lay.T)


def post_process(mu_hat: float, wbar_hat, train: Dataset, T: int = 3, tol: float = 1e-8) -> Classifier:
    """Refit on all of ``train``: min T/(2(T-1)mu) |w|^2 + sum hinge, |w| <= wbar.

    Each fold trained on (T-1)/T of the data, so the regularizer weight is
    rescaled by T/(T-1); for T = 3 the coefficient is 3/(4 mu).
    """
    _check_labels(train)
    wbar_hat = np.broadcast_to(np.asarray(wbar_hat, float), (train.n,))
    n = train.n
    coef = T / (2.0 * (T - 1) * mu_hat)
    box = Box(np.concatenate([-wbar_hat, [-np.inf]]), np.concatenate([wbar_hat, [np.inf]]))
    P = sp.diags(np.concatenate([np.full(n, 2.0 * coef), [0.0]])).tocsr()
    A = train.X
    b = train.labels
    coo = sp.coo_matrix(A)
    rows = np.concatenate([coo.row, np.arange(train.size)])
    cols = np.concatenate([coo.col, np.full(train.size, n)])
    vals = np.concatenate([-b[coo.row] * coo.data, b])
    H = sp.csr_matrix((vals, (rows, cols)), shape=(train.size, n + 1))
    terms = MaxAffineTerms.hinges(H, np.ones(train.size), 1.0)
    z0 = np.zeros(n + 1)
    B = ProgramBuilder(box, z0)
    B.smooth.append(Quadratic(P))
    blk = B.add_terms(terms, z0)
    B.add_linear_objective(blk.r, 1.0)
    cert = ip_solve(B.build(), tol=tol)
    z = cert.primal
    return Classifier(np.clip(z[:n], -wbar_hat, wbar_hat), float(z[n]))


def test_error(clf: Classifier, test: Dataset) -> float:
    """Fraction of misclassified points; sign(0) counts as +1."""
    if test.size == 0:
        raise ValueError("empty test set")
    pred = clf.predict(test.X)
    return float(np.mean(0.5 * np.abs(pred - test.labels)))
