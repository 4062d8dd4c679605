"""Primal-dual interior-point solver for smooth convex programs.

Problem form::

    min  f(z)
    s.t. c_i(z) <= 0      (smooth convex rows, optional)
         A z <= b
         lo <= z <= hi    (infinite entries mean no bound)

Inequality rows get slack variables ``w > 0`` so the start may violate them;
box bounds are kept strictly interior throughout.  Steps use Mehrotra's
predictor-corrector with a common primal/dual step length and a
fraction-to-boundary rule, followed by backtracking on a residual merit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .convex import Box, Smooth, as_vec
from .errors import (DimensionMismatch, Infeasible, MaxIterations,
                     NumericalBreakdown)

log = logging.getLogger(__name__)

DEFAULT_TOL = 1e-8
REGULARIZATION = 1e-10
FRACTION_TO_BOUNDARY = 0.995
DENSE_LIMIT = 400
INFEASIBILITY_COUPLING = 1e-2   # barrier target kept >= this times the residual
STALL_LIMIT = 8          # iterations without merit decrease before giving up
STALL_FEASIBILITY = 1e-4   # a stall this far from feasibility is reported as Infeasible


@dataclass(frozen=True)
class SmoothConvexProgram:
    objective: Smooth
    box: Box
    A: sp.csr_matrix | None = None
    b: np.ndarray | None = None
    nonlinear: tuple = ()
    x0: np.ndarray | None = None
    nonlinear_scale: np.ndarray | None = None   # magnitude of each nonlinear row

    def __post_init__(self):
        n = self.objective.dim
        if self.box.dim != n:
            raise DimensionMismatch("box and objective dimensions differ")
        A = self.A
        if A is None:
            A = sp.csr_matrix((0, n))
            b = np.zeros(0)
        else:
            A = sp.csr_matrix(A, dtype=float)
            b = as_vec(self.b, "b") if self.b is not None else np.zeros(A.shape[0])
            if A.shape[1] != n or b.size != A.shape[0]:
                raise DimensionMismatch("A and b do not match the program dimension")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "nonlinear", tuple(self.nonlinear))
        for c in self.nonlinear:
            if c.dim != n:
                raise DimensionMismatch("nonlinear row has the wrong dimension")
        scale = (np.ones(len(self.nonlinear)) if self.nonlinear_scale is None
                 else as_vec(self.nonlinear_scale, "nonlinear_scale"))
        if scale.size != len(self.nonlinear) or np.any(scale < 1.0):
            raise ValueError("nonlinear_scale needs one entry >= 1 per nonlinear row")
        object.__setattr__(self, "nonlinear_scale", scale)

    @property
    def n(self) -> int:
        return self.objective.dim

    @property
    def m(self) -> int:
        return self.A.shape[0]


@dataclass(frozen=True)
class KktCertificate:
    primal: np.ndarray
    duals: np.ndarray
    nonlinear_duals: np.ndarray
    lower_duals: np.ndarray
    upper_duals: np.ndarray
    stationarity_residual: float
    complementarity_residual: float
    feasibility_residual: float
    objective: float
    iterations: int
    merit_history: tuple = field(default=(), repr=False)

    @property
    def residual(self) -> float:
        return max(self.stationarity_residual, self.complementarity_residual,
                   self.feasibility_residual)

    @property
    def box_duals(self) -> np.ndarray:
        """Net box multiplier: upper minus lower (adds to the stationarity)."""
        return self.upper_duals - self.lower_duals


def _inf(v) -> float:
    return float(np.max(np.abs(v), initial=0.0))


def _pair_max(G, y, sl, zl, su, zu) -> float:
    """Largest product of a multiplier with its constraint slack."""
    return float(max(np.max(np.abs(G) * y, initial=0.0), np.max(sl * zl, initial=0.0),
                     np.max(su * zu, initial=0.0)))


def _max_step(v: np.ndarray, dv: np.ndarray) -> float:
    neg = dv < 0
    if not np.any(neg):
        return 1.0
    return float(min(1.0, np.min(-v[neg] / dv[neg])))


def _interior_start(x0: np.ndarray, box: Box) -> np.ndarray:
    lo, hi = box.lo, box.hi
    width = hi - lo
    delta = np.minimum(0.1 * np.where(np.isfinite(width), width, np.inf),
                       1e-2 * np.maximum(1.0, np.abs(x0)))
    z = x0.copy()
    low = np.isfinite(lo)
    up = np.isfinite(hi)
    z[low] = np.maximum(z[low], lo[low] + delta[low])
    z[up] = np.minimum(z[up], hi[up] - delta[up])
    return z


def _default_start(box: Box) -> np.ndarray:
    lo, hi = box.lo, box.hi
    z = np.zeros(box.dim)
    both = np.isfinite(lo) & np.isfinite(hi)
    z[both] = 0.5 * (lo[both] + hi[both])
    only_lo = np.isfinite(lo) & ~np.isfinite(hi)
    z[only_lo] = lo[only_lo] + 1.0
    only_hi = ~np.isfinite(lo) & np.isfinite(hi)
    z[only_hi] = hi[only_hi] - 1.0
    return z


class _Evaluator:
    """Evaluates objective/constraint data at a point."""

    def __init__(self, p: SmoothConvexProgram):
        self.p = p
        self.At = p.A.T.tocsr()

    def in_domain(self, z) -> bool:
        if not self.p.objective.in_domain(z):
            return False
        return all(c.in_domain(z) for c in self.p.nonlinear)

    def constraints(self, z) -> np.ndarray:
        cv = [c.value(z) for c in self.p.nonlinear]
        return np.concatenate([np.asarray(cv, dtype=float), self.p.A @ z - self.p.b])

    def jac_nonlinear(self, z) -> np.ndarray:
        if not self.p.nonlinear:
            return np.zeros((0, self.p.n))
        return np.vstack([c.grad(z) for c in self.p.nonlinear])

    def grad_lagrangian(self, z, y, JN) -> np.ndarray:
        q = len(self.p.nonlinear)
        g = self.p.objective.grad(z)
        if q:
            g = g + JN.T @ y[:q]
        return g + self.At @ y[q:]


def ip_solve(p: SmoothConvexProgram, tol: float = DEFAULT_TOL, max_iter: int = 200,
             regularization: float = REGULARIZATION) -> KktCertificate:
    """Solve ``p`` to scaled stationarity, complementarity and feasibility.

    Termination requires

        |grad L|              <= tol * (1 + largest term of grad L)
        max_i dual_i |slack_i| <= tol * s_i
        max_i max(G_i, 0)      <= tol * s_i

    with s_i = 1 + |b|_inf on linear rows and the program's
    ``nonlinear_scale`` on nonlinear rows.

    The certificate reports the unscaled quantities.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    n, q, m = p.n, len(p.nonlinear), p.m
    ev = _Evaluator(p)
    lo, hi = p.box.lo, p.box.hi
    L = np.flatnonzero(np.isfinite(lo))
    U = np.flatnonzero(np.isfinite(hi))
    if np.any(hi - lo <= 0):
        raise Infeasible("box has an empty interior")

    x0 = _default_start(p.box) if p.x0 is None else as_vec(p.x0, "x0")
    z = _interior_start(x0, p.box)
    if not ev.in_domain(z):
        raise Infeasible("initial point is outside the objective domain")
    G = ev.constraints(z)
    w = np.maximum(-G, 1.0)
    y = np.ones(q + m)
    zl = np.ones(L.size)
    zu = np.ones(U.size)
    n_pairs = q + m + L.size + U.size
    scale_p = 1.0 + float(np.max(np.abs(p.b), initial=0.0))
    row_scale = np.concatenate([p.nonlinear_scale, np.full(m, scale_p)])

    def residuals(z, w, y, zl, zu):
        JN = ev.jac_nonlinear(z)
        rd = ev.grad_lagrangian(z, y, JN)
        rd[L] -= zl
        rd[U] += zu
        G = ev.constraints(z)
        rp = G + w
        return rd, rp, G, JN

    def merit(rd, rp, z, w, y, zl, zu):
        gap = w @ y + (z[L] - lo[L]) @ zl + (hi[U] - z[U]) @ zu
        return float(np.linalg.norm(rd) + np.linalg.norm(rp) + gap)

    def certificate(z, y, zl, zu, rd, G, it, hist):
        lower = np.zeros(n)
        upper = np.zeros(n)
        lower[L] = zl
        upper[U] = zu
        comp = _pair_max(G, y, z[L] - lo[L], zl, hi[U] - z[U], zu)
        feas = float(np.max(G, initial=0.0))
        return KktCertificate(z.copy(), y[q:].copy(), y[:q].copy(), lower, upper,
                              float(np.linalg.norm(rd)), comp, max(feas, 0.0),
                              float(p.objective.value(z)), it, tuple(hist))

    rd, rp, G, JN = residuals(z, w, y, zl, zu)
    hist = [merit(rd, rp, z, w, y, zl, zu)]
    best_merit, best_cert, stalled = hist[0], None, 0
    for it in range(max_iter + 1):
        sl = z[L] - lo[L]
        su = hi[U] - z[U]
        comp = _pair_max(G, y, sl, zl, su, zu)
        feas = float(np.max(G, initial=0.0))
        stat = float(np.linalg.norm(rd))
        scale_d = 1.0 + max(_inf(p.objective.grad(z)), _inf(JN.T @ y[:q]) if q else 0.0,
                            _inf(ev.At @ y[q:]), _inf(zl), _inf(zu))
        comp_rel = max(np.max(np.abs(G) * y / row_scale, initial=0.0),
                       _pair_max(G[:0], y[:0], sl, zl, su, zu) / scale_p)
        if stat <= tol * scale_d and comp_rel <= tol and np.max(G / row_scale, initial=0.0) <= tol:
            return certificate(z, y, zl, zu, rd, G, it, hist)
        if it == max_iter:
            break
        if not np.all(np.isfinite(rd)) or not np.all(np.isfinite(rp)):
            raise NumericalBreakdown("non-finite residuals")
        if np.max(y, initial=0.0) > 1e14 or np.max(zl, initial=0.0) > 1e14 \
                or np.max(zu, initial=0.0) > 1e14:
            raise Infeasible("dual variables diverged; constraints look infeasible")

        mu = (w @ y + sl @ zl + su @ zu) / max(n_pairs, 1)
        # Newton matrix
        W = p.objective.hess(z)
        for i, c in enumerate(p.nonlinear):
            if y[i] != 0.0:
                W = W + y[i] * c.hess(z)
        d = y / w
        diag = np.zeros(n)
        diag[L] += zl / sl
        diag[U] += zu / su
        solve, _ = _factor(W, p.A, d[q:], JN, d[:q], diag, regularization, regularization)

        def newton(r_w, r_l, r_u):
            rhs = -rd - ev.At @ ((y[q:] * rp[q:] - r_w[q:]) / w[q:])
            if q:
                rhs -= JN.T @ ((y[:q] * rp[:q] - r_w[:q]) / w[:q])
            rhs[L] -= r_l / sl
            rhs[U] += r_u / su
            dz, u = solve(rhs)
            Jdz = np.concatenate([JN @ dz, p.A @ dz])
            dw = -rp - Jdz
            # u = D J dz; taking it from the solve avoids dividing noise by small w
            dy = u + (y * rp - r_w) / w
            dzl = (-r_l - zl * dz[L]) / sl
            dzu = (-r_u + zu * dz[U]) / su
            return dz, dw, dy, dzl, dzu

        # predictor
        dz, dw, dy, dzl, dzu = newton(w * y, sl * zl, su * zu)
        a_aff = min(_max_step(w, dw), _max_step(y, dy), _max_step(sl, dz[L]),
                    _max_step(su, -dz[U]), _max_step(zl, dzl), _max_step(zu, dzu))
        mu_aff = ((w + a_aff * dw) @ (y + a_aff * dy)
                  + (sl + a_aff * dz[L]) @ (zl + a_aff * dzl)
                  + (su - a_aff * dz[U]) @ (zu + a_aff * dzu)) / max(n_pairs, 1)
        sigma = min(1.0, (mu_aff / mu) ** 3) if mu > 0 else 0.0
        # do not let the barrier run ahead of the residuals: once slacks
        # collapse before feasibility is reached the iteration stalls
        if mu > 0:
            lag = INFEASIBILITY_COUPLING * max(_inf(rp), _inf(rd)) / mu
            sigma = max(sigma, min(lag, 0.5))
        # corrector
        corrected = newton(w * y + dw * dy - sigma * mu,
                           sl * zl + dz[L] * dzl - sigma * mu,
                           su * zu - dz[U] * dzu - sigma * mu)
        phi0 = hist[-1]
        best = None
        for direction in (corrected, None):
            if direction is None:
                # the corrector terms can spoil descent far from the central
                # path; retry with the plain centered Newton direction
                direction = newton(w * y - sigma * mu, sl * zl - sigma * mu, su * zu - sigma * mu)
            dz, dw, dy, dzl, dzu = direction
            a_max = min(_max_step(w, dw), _max_step(y, dy), _max_step(sl, dz[L]),
                        _max_step(su, -dz[U]), _max_step(zl, dzl), _max_step(zu, dzu))
            alpha = min(1.0, FRACTION_TO_BOUNDARY * a_max)
            accepted = False
            for _ in range(30):
                zn = z + alpha * dz
                if ev.in_domain(zn):
                    cand = (zn, w + alpha * dw, y + alpha * dy, zl + alpha * dzl, zu + alpha * dzu)
                    rdn, rpn, Gn, JNn = residuals(*cand)
                    if np.all(np.isfinite(rdn)) and np.all(np.isfinite(rpn)):
                        phin = merit(rdn, rpn, *cand)
                        if best is None or phin < best[0]:
                            best = (phin, cand, rdn, rpn, Gn, JNn)
                        if phin <= (1.0 - 1e-4 * alpha) * phi0:
                            accepted = True
                            break
                alpha *= 0.5
            if accepted:
                break
        if best is None:
            raise NumericalBreakdown("no step stays inside the objective domain")
        phin, (z, w, y, zl, zu), rd, rp, G, JN = best
        hist.append(phin)
        stalled = stalled + 1 if phin >= phi0 * (1.0 - 1e-9) else 0
        if phin < best_merit:
            best_merit = phin
            best_cert = certificate(z, y, zl, zu, rd, G, it + 1, hist)
        if stalled >= STALL_LIMIT:
            if best_cert is None:
                best_cert = certificate(z, y, zl, zu, rd, G, it + 1, hist)
            if best_cert.feasibility_residual > STALL_FEASIBILITY * scale_p:
                raise Infeasible(f"interior point stalled after {it + 1} iterations with rows "
                                 f"violated by {best_cert.feasibility_residual:.2e}")
            raise MaxIterations(f"interior point stalled after {it + 1} iterations "
                                f"(stationarity {best_cert.stationarity_residual:.2e}, "
                                f"complementarity {best_cert.complementarity_residual:.2e}, "
                                f"feasibility {best_cert.feasibility_residual:.2e})", best_cert)
        log.debug("ip it=%d stat=%.2e comp=%.2e feas=%.2e mu=%.2e sigma=%.2e alpha=%.3f",
                  it, stat, comp, feas, mu, sigma, alpha)
    raise MaxIterations(f"interior point stopped after {max_iter} iterations "
                        f"(stationarity {np.linalg.norm(rd):.2e}, "
                        f"complementarity {comp:.2e}, feasibility {feas:.2e})", best_cert)


def _factor(W, A, dA, JN, dN, diag, reg, base_reg):
    """Return a solver for (W + A'DA + JN'DN JN + diag) dz = rhs.

    Small problems use a dense Cholesky factor of that matrix.  Larger ones
    factor the equivalent quasidefinite augmented system

        [ W + diag   A'        JN'      ] [dz]   [rhs]
        [ A         -1/dA       0       ] [u ] = [ 0 ]
        [ JN         0        -1/dN     ] [v ]   [ 0 ]

    which stays well conditioned when y/w spans many orders of magnitude.
    Both carry ``reg`` on the diagonal, and two steps of iterative refinement
    against the unregularized operator recover the accuracy lost to it.
    """
    n = diag.size
    Ws = sp.csr_matrix(W) if sp.issparse(W) or n > DENSE_LIMIT else None
    Wd = None if Ws is not None else np.asarray(W, dtype=float)
    while True:
        try:
            inner, matvec, size = _factor_once(Ws, Wd, A, dA, JN, dN, diag, reg, n)
            break
        except (la.LinAlgError, RuntimeError, ValueError, ZeroDivisionError):
            if reg >= 1e-4:
                raise NumericalBreakdown("Newton system singular beyond regularization")
            reg = max(reg * 100.0, base_reg * 100.0)

    q = JN.shape[0]

    def solve(r):
        """Return dz and the multiplier block u = D J dz ordered as (JN, A)."""
        rr = np.zeros(size)
        rr[:n] = r
        x = inner(rr)
        for _ in range(2):
            x = x + inner(rr - matvec(x))
        dz = x[:n]
        if size == n:
            return dz, np.concatenate([dN * (JN @ dz), dA * (A @ dz)])
        return dz, np.concatenate([x[n + A.shape[0]:], x[n:n + A.shape[0]]])
    return solve, reg


def _factor_once(Ws, Wd, A, dA, JN, dN, diag, reg, n):
    if Wd is not None:
        K = Wd.copy()
        if A.shape[0]:
            K += (A.T @ A.multiply(dA[:, None]).tocsr()).toarray()
        if JN.shape[0]:
            K += JN.T @ (dN[:, None] * JN)
        K0 = K.copy()
        K0[np.diag_indices(n)] += diag
        K[np.diag_indices(n)] += diag + reg
        cf = la.cho_factor(K, lower=True, check_finite=False)
        if not np.all(np.isfinite(cf[0].diagonal())):
            raise la.LinAlgError("non-finite factor")
        return (lambda r: la.cho_solve(cf, r, check_finite=False)), (lambda v: K0 @ v), n
    J = sp.vstack([A, sp.csr_matrix(JN)]).tocsr() if JN.shape[0] else sp.csr_matrix(A)
    dJ = np.concatenate([dA, dN]) if JN.shape[0] else np.asarray(dA)
    k = J.shape[0]
    neg = -1.0 / dJ
    top = Ws + sp.diags(diag)
    K0 = sp.bmat([[top, J.T], [J, sp.diags(neg)]], format="csc")
    K = K0 + sp.diags(np.concatenate([np.full(n, reg), np.full(k, -reg)]), format="csc")
    lu = spla.splu(K, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options={"SymmetricMode": True})
    return lu.solve, (lambda v: K0 @ v), n + k
