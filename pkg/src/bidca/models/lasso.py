"""Cross-validated lasso as a bilevel program in the single variable lambda.

With one coefficient vector w^t per fold the lower objective is

    sum_t [ sum_{j in trn_t} (a_j'w^t - b_j)^2 / lambda + |w^t|_1 ]

which is jointly convex in (lambda, w) because each squared residual over
lambda is a perspective.  The upper objective is the mean squared validation
error.  There are no lower-level constraints, so the value-function
subgradient is the partial derivative of f in lambda at the lower solution.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from ..bilevel import BilevelProblem, solve_lower
from ..convex import Box, MaxAffineTerms, PerspectiveSquares, Quadratic, StructuredConvex
from ..data import Dataset, FoldPlan
from ..ipm import ip_solve
from ..slack import ProgramBuilder


@dataclass(frozen=True)
class LassoBounds:
    lam_lb: float = 1e-4
    lam_ub: float = 1e4

    def __post_init__(self):
        if not 0 < self.lam_lb < self.lam_ub:
            raise ValueError("the lambda box must satisfy 0 < lam_lb < lam_ub")


@dataclass(frozen=True)
class LassoLayout:
    n: int
    T: int
    nx = 1

    @property
    def ny(self) -> int:
        return self.n * self.T

    def w(self, t: int) -> np.ndarray:
        """Indices of w^t in z = (lambda, w^1, ..., w^T)."""
        return 1 + t * self.n + np.arange(self.n)


def _residual_rows(data: Dataset, idx: np.ndarray, lay: LassoLayout, t: int, dim: int):
    """Rows of a_j'w^t as a matrix on z, with targets b_j."""
    coo = sp.coo_matrix(data.X[idx])
    R = sp.csr_matrix((coo.data, (coo.row, lay.w(t)[coo.col])), shape=(idx.size, dim))
    return R, data.labels[idx]


def build_lasso_cv(data: Dataset, plan: FoldPlan, bounds: LassoBounds = LassoBounds()) -> BilevelProblem:
    """Bilevel program for T-fold cross-validated lasso on ``data``."""
    if plan.assignment.size != data.size:
        raise ValueError("fold plan does not match the dataset")
    T, n = plan.T, data.n
    if T < 2:
        raise ValueError("need at least two folds")
    lay = LassoLayout(n, T)
    dim = 1 + lay.ny
    trn_R, trn_b, val_R, val_b, val_w = [], [], [], [], []
    for t in range(T):
        val, trn = plan.val(t), plan.trn(t)
        if val.size == 0 or trn.size == 0:
            raise ValueError(f"fold {t} is empty")
        R, b = _residual_rows(data, trn, lay, t, dim)
        trn_R.append(R), trn_b.append(b)
        R, b = _residual_rows(data, val, lay, t, dim)
        val_R.append(R), val_b.append(b), val_w.append(np.full(val.size, 1.0 / (T * val.size)))
    Rv, bv, dv = sp.vstack(val_R).tocsr(), np.concatenate(val_b), np.concatenate(val_w)
    # Theta = sum_j d_j (r_j'z - b_j)^2
    DR = sp.diags(dv) @ Rv
    F1 = StructuredConvex(dim, smooth=Quadratic((2.0 * Rv.T @ DR).tocsr(),
                                                -2.0 * (DR.T @ bv), float(bv @ (dv * bv)), dim))
    sel = sp.csr_matrix((np.ones(lay.ny), (np.arange(lay.ny), 1 + np.arange(lay.ny))),
                        shape=(lay.ny, dim))
    f = StructuredConvex(dim, smooth=PerspectiveSquares(sp.vstack(trn_R), np.concatenate(trn_b), 0),
                         terms=MaxAffineTerms.abs_values(sel, 1.0))
    X = Box(np.array([bounds.lam_lb]), np.array([bounds.lam_ub]))
    return BilevelProblem(1, lay.ny, F1, StructuredConvex.zero(dim), f, X, Box.free(lay.ny),
                          partial_formula="x-separable", name=f"lasso-cv:{data.name}",
                          meta={"layout": lay, "plan": plan, "bounds": bounds, "data": data})


def lasso_start(p: BilevelProblem, lam: float = 1.0):
    """Start at lambda = ``lam`` (projected onto the box) with all w = 0."""
    return p.X.project(np.array([lam], dtype=float)), np.zeros(p.ny)


def cv_error(p: BilevelProblem, x) -> tuple[float, np.ndarray]:
    """Re-solve the lower level at x and return (Theta, y)."""
    sol = solve_lower(p, x)
    return p.F1.value(np.concatenate([sol.x, sol.y])), sol.y


def validation_error(p: BilevelProblem, y) -> float:
    """Mean squared validation error computed fold by fold."""
    lay: LassoLayout = p.meta["layout"]
    data: Dataset = p.meta["data"]
    plan: FoldPlan = p.meta["plan"]
    total = 0.0
    for t in range(lay.T):
        val = plan.val(t)
        r = data.X[val] @ y[t * lay.n:(t + 1) * lay.n] - data.labels[val]
        total += float(np.mean(r * r))
    return total / lay.T


def refit(lam: float, train: Dataset, T: int = 3, tol: float = 1e-8) -> np.ndarray:
    """Refit on all of ``train``: min sum_j (a_j'w - b_j)^2 / lam + T/(T-1) |w|_1.

    Each fold saw (T-1)/T of the rows, so the l1 weight grows by T/(T-1) to
    keep the balance between the two terms.
    """
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n = train.n
    X = sp.csr_matrix(train.X)
    z0 = np.zeros(n)
    B = ProgramBuilder(Box.free(n), z0)
    B.smooth.append(Quadratic((2.0 / lam) * (X.T @ X).tocsr(), (-2.0 / lam) * (X.T @ train.labels),
                              float(train.labels @ train.labels) / lam, n))
    weight = T / (T - 1.0)
    blk = B.add_terms(MaxAffineTerms.abs_values(sp.identity(n, format="csr"), weight), z0)
    B.add_linear_objective(blk.r, weight)
    return ip_solve(B.build(), tol=tol).primal[:n].copy()


def test_mse(w, test: Dataset) -> float:
    """Mean squared prediction error of the linear model ``w`` on ``test``."""
    if test.size == 0:
        raise ValueError("empty test set")
    r = test.X @ np.asarray(w, dtype=float) - test.labels
    return float(np.mean(r * r))
