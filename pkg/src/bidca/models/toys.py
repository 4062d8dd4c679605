"""Small bilevel instances with closed-form lower levels, for oracle tests.

``clamp``       F = (x-1)^2 + (y-1)^2,   y in argmin_{y in [0,1]} (y-x)^2,  x in [-2, 2]
                S(x) = clamp(x, 0, 1), v(x) = max(x-1, 0)^2 + max(-x, 0)^2,
                bilevel optimum (1, 1) with value 0.
``quadratic``   F = (x-1)^2 + (y+0.5)^2, y in argmin_{y in [-1,1]} (y-x/2)^2, x in [-2, 2]
                S(x) = clamp(x/2, -1, 1); bilevel optimum (0.6, 0.3) with value 0.8.
``lasso``       cross-validated lasso on a fixed synthetic regression set
                (30 rows, 3 features, T = 3).

Both scalar toys have a smooth lower objective, so they also run under the
linearized variant.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from ..bilevel import BilevelProblem
from ..convex import Box, Quadratic, StructuredConvex
from ..data import Dataset, fold_plan

TOY_IDS = ("clamp", "quadratic", "lasso")


def _scalar_toy(name: str, F1: Quadratic, f: Quadratic, X: Box, Y: Box, meta: dict) -> BilevelProblem:
    return BilevelProblem(1, 1, StructuredConvex(2, smooth=F1), StructuredConvex.zero(2),
                          StructuredConvex(2, smooth=f), X, Y, partial_formula="smooth",
                          name=f"toy:{name}", meta=meta)


def _clamp() -> BilevelProblem:
    # (x-1)^2 + (y-1)^2 and (y-x)^2 written as 0.5 z'Pz + q'z + c
    F1 = Quadratic(np.diag([2.0, 2.0]), np.array([-2.0, -2.0]), 2.0)
    f = Quadratic(np.array([[2.0, -2.0], [-2.0, 2.0]]))
    meta = {"solution": np.array([1.0, 1.0]), "optimal_value": 0.0,
            "S": lambda x: min(max(x, 0.0), 1.0),
            "v": lambda x: max(x - 1.0, 0.0) ** 2 + max(-x, 0.0) ** 2}
    return _scalar_toy("clamp", F1, f, Box.uniform(1, -2.0, 2.0), Box.uniform(1, 0.0, 1.0), meta)


def _quadratic() -> BilevelProblem:
    # (x-1)^2 + (y+0.5)^2 and (y - x/2)^2
    F1 = Quadratic(np.diag([2.0, 2.0]), np.array([-2.0, 1.0]), 1.25)
    f = Quadratic(np.array([[0.5, -1.0], [-1.0, 2.0]]))
    meta = {"solution": np.array([0.6, 0.3]), "optimal_value": 0.8,
            "S": lambda x: min(max(0.5 * x, -1.0), 1.0),
            "v": lambda x: max(abs(0.5 * x) - 1.0, 0.0) ** 2}
    return _scalar_toy("quadratic", F1, f, Box.uniform(1, -2.0, 2.0), Box.uniform(1, -1.0, 1.0), meta)


def lasso_toy_data(seed: int = 7) -> Dataset:
    """30 rows, 3 features, sparse ground truth (1.5, 0, -2) plus noise."""
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, size=(30, 3))
    b = A @ np.array([1.5, 0.0, -2.0]) + 0.3 * rng.standard_normal(30)
    return Dataset(b, sp.csr_matrix(A), name="toy-lasso")


def _lasso() -> BilevelProblem:
    from .lasso import LassoBounds, build_lasso_cv
    data = lasso_toy_data()
    return build_lasso_cv(data, fold_plan(data, 3, 0), LassoBounds(1e-2, 1e2))


def build_toy(toy_id: str) -> BilevelProblem:
    """Return the toy instance named ``toy_id`` (one of ``TOY_IDS``)."""
    builders = {"clamp": _clamp, "quadratic": _quadratic, "lasso": _lasso}
    try:
        return builders[toy_id]()
    except KeyError:
        raise KeyError(f"unknown toy {toy_id!r}; choose from {', '.join(TOY_IDS)}") from None
