"""Value-function reformulation of fully convex bilevel programs.

A ``BilevelProblem`` describes

    min_{x in X, y in Y}  F1(x, y) - F2(x, y)
    s.t.  y solves  min_{y in Y} f(x, y)  s.t.  Gx x + Gy y <= h,

with F1, F2, f jointly convex on z = (x, y).  ``assemble_vp`` turns it into the
DC program  min F1 - F2  s.t.  f(x, y) - v(x) <= eps  over the joint feasible
set, where the value function v is evaluated by lower-level solves and its
subgradient is read off the lower-level multipliers.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .convex import (Box, ConvexOracle, MaxAffineTerms, Restricted, StructuredConvex,
                     as_vec)
from .dca import DcaFailure, DcaParams, DcProblem, Trace, run_dca
from .errors import AttestationMissing, Infeasible, LowerLevelInfeasible
from .ipm import KktCertificate, ip_solve
from .slack import ProgramBuilder

LOWER_TOL = 1e-8
ATTESTATIONS = (
    "smooth",                # f smooth in (x, y)
    "x-separable",           # f = smooth(x, y) + nonsmooth(y)
)


@dataclass(frozen=True)
class BilevelProblem:
    nx: int
    ny: int
    F1: StructuredConvex
    F2: StructuredConvex
    f: StructuredConvex
    X: Box
    Y: Box
    Gx: sp.csr_matrix | None = None
    Gy: sp.csr_matrix | None = None
    h: np.ndarray | None = None
    partial_formula: str | None = None
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        d = self.nx + self.ny
        for nm in ("F1", "F2", "f"):
            if getattr(self, nm).dim != d:
                raise ValueError(f"{nm} must act on (x, y) of dimension {d}")
        if self.X.dim != self.nx or self.Y.dim != self.ny:
            raise ValueError("box dimensions do not match nx / ny")
        if self.Gy is None:
            object.__setattr__(self, "Gx", sp.csr_matrix((0, self.nx)))
            object.__setattr__(self, "Gy", sp.csr_matrix((0, self.ny)))
            object.__setattr__(self, "h", np.zeros(0))
        else:
            Gx = sp.csr_matrix(self.Gx if self.Gx is not None else (self.Gy.shape[0], self.nx))
            object.__setattr__(self, "Gx", Gx)
            object.__setattr__(self, "Gy", sp.csr_matrix(self.Gy))
            object.__setattr__(self, "h", as_vec(self.h, "h"))

    @property
    def x_index(self) -> np.ndarray:
        return np.arange(self.nx)

    @property
    def y_index(self) -> np.ndarray:
        return self.nx + np.arange(self.ny)

    @property
    def n_g(self) -> int:
        return self.h.size

    def split(self, z):
        z = np.asarray(z, dtype=float)
        return z[: self.nx], z[self.nx:]

    def join(self, x, y) -> np.ndarray:
        return np.concatenate([np.asarray(x, float).reshape(-1), np.asarray(y, float).reshape(-1)])

    def g(self, x, y) -> np.ndarray:
        return self.Gx @ x + self.Gy @ y - self.h

    @property
    def sigma_rows(self) -> tuple[sp.csr_matrix, np.ndarray]:
        return sp.hstack([self.Gx, self.Gy]).tocsr(), self.h


@dataclass(frozen=True)
class LowerSolution:
    x: np.ndarray
    y: np.ndarray
    gamma: np.ndarray
    theta: np.ndarray | None
    value: float
    kkt_residual: float
    certificate: KktCertificate = field(repr=False)


def solve_lower(p: BilevelProblem, x, tol: float = LOWER_TOL, y0=None) -> LowerSolution:
    """Minimize f(x, .) over {y in Y : g(x, y) <= 0} with multipliers attached."""
    x = as_vec(x, "x")
    if x.size != p.nx:
        raise ValueError("x has the wrong dimension")
    if not p.X.contains(x, 1e-12):
        raise ValueError("x is outside X")
    y_start = p.Y.project(np.zeros(p.ny) if y0 is None else as_vec(y0))
    point = np.concatenate([x, y_start])
    f = p.f
    B = ProgramBuilder(p.Y, y_start)
    if f.smooth_part is not None:
        B.smooth.append(Restricted(f.smooth_part, p.y_index, point))
    B.const += f.const
    block = None
    if f.terms is not None:
        My = f.terms.M[:, p.nx:]
        shift = f.terms.M[:, : p.nx] @ x
        ty = MaxAffineTerms(My, f.terms.offset, f.terms.ptr, f.terms.weight)
        block = B.add_terms(ty, y_start, offset_shift=shift)
        B.add_linear_objective(block.r, f.terms.weight)
    g_rows = np.zeros(0, int)
    if p.n_g:
        g_rows = B.add_rows(p.Gy, p.h - p.Gx @ x)
    prog = B.build()
    try:
        cert = ip_solve(prog, tol=tol)
    except Infeasible as exc:
        raise LowerLevelInfeasible(f"lower level infeasible at x: {exc}") from exc
    y = cert.primal[: p.ny].copy()
    gamma = cert.duals[g_rows].copy() if p.n_g else np.zeros(0)
    theta = block.selection(cert) if block is not None else None
    value = f.value(np.concatenate([x, y]))
    return LowerSolution(x.copy(), y, gamma, theta, value, cert.residual, cert)


def value_subgradient(sol: LowerSolution, p: BilevelProblem) -> np.ndarray:
    """xi1 = grad_x f(x, y~) + sum gamma_i grad_x g_i: an element of the subdifferential of v."""
    if p.partial_formula not in ATTESTATIONS:
        raise AttestationMissing(
            f"model {p.name!r} does not declare a partial-derivative condition")
    z = np.concatenate([sol.x, sol.y])
    g = p.f.smooth_grad(z)[: p.nx]
    if p.f.terms is not None and sol.theta is not None:
        g = g + p.f.terms.combine(sol.theta)[: p.nx]
    if p.n_g:
        g = g + p.Gx.T @ sol.gamma
    return np.asarray(g, dtype=float)


class ValueFunction(ConvexOracle):
    """v(x) lifted to z = (x, y); subgradients are zero in the y-block.

    Lower solves are memoized by the exact bytes of x, guarded by a lock so a
    shared instance is safe under concurrent use.
    """

    def __init__(self, p: BilevelProblem, tol: float = LOWER_TOL, cache_size: int = 64):
        self.p = p
        self.dim = p.nx + p.ny
        self.tol = tol
        self.lipschitz = None
        self._cache: dict[bytes, LowerSolution] = {}
        self._order: list[bytes] = []
        self._size = cache_size
        self._lock = threading.Lock()
        self.solves = 0

    def solution(self, x) -> LowerSolution:
        x = as_vec(x, "x")
        key = x.tobytes()
        with self._lock:
            hit = self._cache.get(key)
        if hit is not None:
            return hit
        sol = solve_lower(self.p, x, self.tol)
        with self._lock:
            self.solves += 1
            self._cache[key] = sol
            self._order.append(key)
            while len(self._order) > self._size:
                self._cache.pop(self._order.pop(0), None)
        return sol

    def value_x(self, x) -> float:
        return self.solution(x).value

    def subgrad_x(self, x) -> np.ndarray:
        return value_subgradient(self.solution(x), self.p)

    def value(self, z) -> float:
        z = as_vec(z)
        return self.value_x(z[: self.p.nx])

    def subgrad(self, z) -> np.ndarray:
        z = as_vec(z)
        g = np.zeros(self.dim)
        g[: self.p.nx] = self.subgrad_x(z[: self.p.nx])
        return g


def assemble_vp(p: BilevelProblem, eps: float, lower_tol: float = LOWER_TOL) -> DcProblem:
    """DC program over z = (x, y) with constraint f - v <= eps."""
    if not eps >= 0:
        raise ValueError("eps must be nonnegative")
    A, b = p.sigma_rows
    return DcProblem(p.F1, p.F2, p.f.shifted(-float(eps)), ValueFunction(p, lower_tol),
                     p.X.concat(p.Y), A if A.shape[0] else None, b if A.shape[0] else None,
                     name=p.name)


@dataclass
class BilevelResult:
    x: np.ndarray
    y: np.ndarray
    lam: float
    trace: Trace
    status: str
    dc: DcProblem = field(repr=False)


def run_bilevel(p: BilevelProblem, eps: float, params: DcaParams, variant: str = "ipdca",
                start=None, lower_tol: float = LOWER_TOL) -> BilevelResult:
    """Run the DC iteration on the relaxed value-function program.

    ``variant`` is ``"ipdca"`` or ``"ipldca"`` (the latter needs a smooth f).
    Solver failures do not raise: the result carries the last iterate and a
    status naming the failure class.
    """
    if variant == "ipldca" and (p.f.lipschitz is None or p.partial_formula != "smooth"):
        raise ValueError("the linearized variant requires an L-smooth lower objective")
    dc = assemble_vp(p, eps, lower_tol)
    if start is None:
        z0 = dc.box.project(np.zeros(dc.dim))
    else:
        z0 = p.join(*start)
    if not dc.box.contains(z0):
        raise ValueError("start is not in X x Y")
    try:
        z, lam, trace = run_dca(dc, params, variant, z0)
        status = "converged"
    except DcaFailure as exc:
        z, lam, trace = exc.z, exc.trace.lam, exc.trace
        status = type(exc.cause).__name__
    x, y = p.split(z)
    return BilevelResult(x, y, lam, trace, status, dc)
