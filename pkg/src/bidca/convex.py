"""Vectors, boxes and convex-function oracles.

Two layers live here.  ``Smooth`` objects are twice differentiable pieces with
value, gradient and Hessian; they feed the interior-point engine directly.
``ConvexOracle`` objects answer value and subgradient queries; the structured
variant (``StructuredConvex``) is a smooth part plus weighted max-affine terms,
which is what the slack reformulation in the DC layer needs.
"""
from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch, NonFiniteInput


def as_vec(z, name: str = "vector") -> np.ndarray:
    """Return ``z`` as a finite 1-D float array (copying only when needed)."""
    v = np.asarray(z, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise DimensionMismatch(f"{name} must be one-dimensional, got shape {v.shape}")
    if not np.all(np.isfinite(v)):
        raise NonFiniteInput(f"{name} has non-finite entries")
    return v


@dataclass(frozen=True)
class Box:
    """Coordinatewise bounds; infinite entries mean the side is absent."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).reshape(-1)
        hi = np.asarray(self.hi, dtype=float).reshape(-1)
        if lo.shape != hi.shape:
            raise DimensionMismatch("box bounds differ in length")
        if np.any(np.isnan(lo)) or np.any(np.isnan(hi)):
            raise NonFiniteInput("box bounds contain NaN")
        if np.any(lo > hi):
            raise ValueError("box has lo > hi")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def free(cls, n: int) -> "Box":
        return cls(np.full(n, -np.inf), np.full(n, np.inf))

    @classmethod
    def uniform(cls, n: int, lo: float, hi: float) -> "Box":
        return cls(np.full(n, float(lo)), np.full(n, float(hi)))

    @property
    def dim(self) -> int:
        return self.lo.size

    def contains(self, z, tol: float = 0.0) -> bool:
        z = np.asarray(z, dtype=float)
        return bool(np.all(z >= self.lo - tol) and np.all(z <= self.hi + tol))

    def project(self, z) -> np.ndarray:
        return project_box(z, self)

    def concat(self, other: "Box") -> "Box":
        return Box(np.concatenate([self.lo, other.lo]), np.concatenate([self.hi, other.hi]))


def project_box(z, b: Box) -> np.ndarray:
    """Componentwise clamp of ``z`` onto ``b``."""
    z = as_vec(z, "z")
    if z.size != b.dim:
        raise DimensionMismatch(f"point has dimension {z.size}, box has {b.dim}")
    return np.minimum(np.maximum(z, b.lo), b.hi)


def hinge(u: float) -> float:
    """max(1 - u, 0)."""
    u = float(u)
    if not np.isfinite(u):
        raise NonFiniteInput("hinge argument is not finite")
    return max(1.0 - u, 0.0)


def hinge_subgrad(u: float) -> float:
    """Element of the subdifferential of the hinge; 0 at the kink u = 1."""
    u = float(u)
    if not np.isfinite(u):
        raise NonFiniteInput("hinge argument is not finite")
    return -1.0 if u < 1.0 else 0.0


# ---------------------------------------------------------------------------
# Smooth pieces


class Smooth(ABC):
    """Twice-differentiable convex function on R^dim."""

    dim: int
    #: Lipschitz constant of the gradient, or None when unknown/unbounded.
    lipschitz: float | None = None
    #: True when the Hessian does not depend on the point.
    quadratic: bool = False

    @abstractmethod
    def value(self, z: np.ndarray) -> float: ...

    @abstractmethod
    def grad(self, z: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def hess(self, z: np.ndarray) -> sp.spmatrix | np.ndarray: ...

    def in_domain(self, z: np.ndarray) -> bool:
        return True


class Quadratic(Smooth):
    """0.5 z'Pz + q'z + c with symmetric PSD ``P`` (dense or sparse)."""

    quadratic = True

    def __init__(self, P=None, q=None, c: float = 0.0, dim: int | None = None):
        if dim is None:
            dim = P.shape[0] if P is not None else len(q)
        self.dim = int(dim)
        self.P = sp.csr_matrix(P) if P is not None else sp.csr_matrix((self.dim, self.dim))
        self.q = np.zeros(self.dim) if q is None else np.asarray(q, dtype=float).copy()
        self.c = float(c)
        if self.P.nnz:
            self.lipschitz = float(abs(self.P).sum(axis=1).max())
        else:
            self.lipschitz = 0.0

    def value(self, z):
        return float(0.5 * z @ (self.P @ z) + self.q @ z + self.c)

    def grad(self, z):
        return self.P @ z + self.q

    def hess(self, z):
        return self.P


class SmoothSum(Smooth):
    """Sum of smooth functions of the same dimension."""

    def __init__(self, parts: Sequence[Smooth]):
        parts = list(parts)
        if not parts:
            raise ValueError("empty sum")
        self.parts = parts
        self.dim = parts[0].dim
        if any(p.dim != self.dim for p in parts):
            raise DimensionMismatch("summands differ in dimension")
        lips = [p.lipschitz for p in parts]
        self.lipschitz = None if any(v is None for v in lips) else float(sum(lips))
        self.quadratic = all(p.quadratic for p in parts)

    def value(self, z):
        return float(sum(p.value(z) for p in self.parts))

    def grad(self, z):
        return sum(p.grad(z) for p in self.parts)

    def hess(self, z):
        hs = [p.hess(z) for p in self.parts]
        if all(sp.issparse(h) for h in hs):
            return sum(hs[1:], hs[0]).tocsr()
        return sum(h.toarray() if sp.issparse(h) else h for h in hs)

    def in_domain(self, z):
        return all(p.in_domain(z) for p in self.parts)


class Embedded(Smooth):
    """``inner`` applied to ``z[idx]`` inside a larger space of size ``dim``."""

    def __init__(self, inner: Smooth, idx, dim: int):
        self.inner = inner
        self.idx = np.asarray(idx, dtype=int)
        self.dim = int(dim)
        self.lipschitz = inner.lipschitz
        self.quadratic = inner.quadratic
        k = self.idx.size
        self._lift = sp.csr_matrix((np.ones(k), (self.idx, np.arange(k))), shape=(self.dim, k))

    def value(self, z):
        return self.inner.value(z[self.idx])

    def grad(self, z):
        g = np.zeros(self.dim)
        g[self.idx] = self.inner.grad(z[self.idx])
        return g

    def hess(self, z):
        h = sp.csr_matrix(self.inner.hess(z[self.idx]))
        return (self._lift @ h @ self._lift.T).tocsr()

    def in_domain(self, z):
        return self.inner.in_domain(z[self.idx])


class Restricted(Smooth):
    """Function of ``y`` obtained by freezing the complementary coordinates.

    ``base`` lives on the full space; ``free`` lists the coordinates that stay
    variable and ``fixed`` supplies the values of all the others.
    """

    def __init__(self, base: Smooth, free, point: np.ndarray):
        self.base = base
        self.free = np.asarray(free, dtype=int)
        self.point = np.array(point, dtype=float)
        self.dim = self.free.size
        self.lipschitz = base.lipschitz
        self.quadratic = base.quadratic

    def _full(self, y):
        z = self.point.copy()
        z[self.free] = y
        return z

    def value(self, y):
        return self.base.value(self._full(y))

    def grad(self, y):
        return self.base.grad(self._full(y))[self.free]

    def hess(self, y):
        h = self.base.hess(self._full(y))
        if sp.issparse(h):
            return h.tocsr()[self.free][:, self.free]
        return h[np.ix_(self.free, self.free)]

    def in_domain(self, y):
        return self.base.in_domain(self._full(y))


# ---------------------------------------------------------------------------
# Max-affine terms


@dataclass(frozen=True)
class MaxAffineTerms:
    """sum_j weight_j * max_{k in piece group j} (M_k z + offset_k).

    Pieces of term ``j`` are rows ``ptr[j]:ptr[j+1]`` of ``M``.  A row without
    nonzeros is a constant piece; the slack reformulation turns those into
    simple lower bounds.
    """

    M: sp.csr_matrix
    offset: np.ndarray
    ptr: np.ndarray
    weight: np.ndarray

    def __post_init__(self):
        M = sp.csr_matrix(self.M, dtype=float)
        off = np.asarray(self.offset, dtype=float).reshape(-1)
        ptr = np.asarray(self.ptr, dtype=int).reshape(-1)
        w = np.asarray(self.weight, dtype=float).reshape(-1)
        if ptr[0] != 0 or ptr[-1] != M.shape[0] or np.any(np.diff(ptr) < 1):
            raise ValueError("bad term pointer array")
        if w.size != ptr.size - 1 or off.size != M.shape[0]:
            raise DimensionMismatch("term weights or offsets have the wrong length")
        if np.any(w < 0):
            raise ValueError("term weights must be nonnegative")
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "ptr", ptr)
        object.__setattr__(self, "weight", w)

    @classmethod
    def hinges(cls, rows: sp.spmatrix, offset, weight) -> "MaxAffineTerms":
        """Terms weight_j * max(rows_j z + offset_j, 0)."""
        rows = sp.csr_matrix(rows)
        m, d = rows.shape
        zero = sp.csr_matrix((m, d))
        M = sp.vstack([rows, zero]).tocsr()
        order = np.ravel(np.column_stack([np.arange(m), m + np.arange(m)]))
        off = np.concatenate([np.asarray(offset, float), np.zeros(m)])
        return cls(M[order], off[order], 2 * np.arange(m + 1), np.broadcast_to(weight, (m,)))

    @classmethod
    def abs_values(cls, rows: sp.spmatrix, weight) -> "MaxAffineTerms":
        """Terms weight_j * |rows_j z| = weight_j * max(rows_j z, -rows_j z)."""
        rows = sp.csr_matrix(rows)
        m = rows.shape[0]
        M = sp.vstack([rows, -rows]).tocsr()
        order = np.ravel(np.column_stack([np.arange(m), m + np.arange(m)]))
        return cls(M[order], np.zeros(2 * m), 2 * np.arange(m + 1), np.broadcast_to(weight, (m,)))

    @property
    def dim(self) -> int:
        return self.M.shape[1]

    @property
    def n_terms(self) -> int:
        return self.weight.size

    @property
    def term_of_piece(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_terms), np.diff(self.ptr))

    def pieces(self, z) -> np.ndarray:
        return self.M @ z + self.offset

    def term_values(self, z) -> np.ndarray:
        return np.maximum.reduceat(self.pieces(z), self.ptr[:-1])

    def value(self, z) -> float:
        return float(self.weight @ self.term_values(z))

    def selection(self, z) -> np.ndarray:
        """Per-piece convex weights selecting the min-norm active combination."""
        pv = self.pieces(z)
        tmax = np.maximum.reduceat(pv, self.ptr[:-1])
        active = pv == tmax[self.term_of_piece]
        theta = active.astype(float)
        counts = np.add.reduceat(theta, self.ptr[:-1])
        for j in np.flatnonzero(counts > 1):
            lo, hi = self.ptr[j], self.ptr[j + 1]
            idx = lo + np.flatnonzero(active[lo:hi])
            theta[lo:hi] = 0.0
            theta[idx] = _min_norm_weights(self.M[idx].toarray())
        return theta

    def subgrad(self, z) -> np.ndarray:
        theta = self.selection(z)
        return self.M.T @ (theta * self.weight[self.term_of_piece])

    def combine(self, theta: np.ndarray) -> np.ndarray:
        """Gradient combination sum_k weight_term(k) * theta_k * M_k."""
        return self.M.T @ (theta * self.weight[self.term_of_piece])


def _min_norm_weights(G: np.ndarray) -> np.ndarray:
    """Convex weights of the minimum-norm point of conv(rows of G)."""
    k = G.shape[0]
    if k == 2:
        a, b = G
        d = a - b
        dd = d @ d
        t = 0.5 if dd == 0 else float(np.clip(-(b @ d) / dd, 0.0, 1.0))
        return np.array([t, 1.0 - t])
    # projected gradient on the simplex for the rare many-way tie
    Q = G @ G.T
    theta = np.full(k, 1.0 / k)
    step = 1.0 / max(np.linalg.eigvalsh(Q).max(), 1e-300)
    for _ in range(500):
        theta = _project_simplex(theta - step * (Q @ theta))
    return theta


def _project_simplex(v: np.ndarray) -> np.ndarray:
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    r = np.nonzero(u - css / (np.arange(v.size) + 1) > 0)[0][-1]
    return np.maximum(v - css[r] / (r + 1.0), 0.0)


# ---------------------------------------------------------------------------
# Oracles


class ConvexOracle(ABC):
    """Convex function with value and one subgradient per query point."""

    dim: int
    #: Gradient Lipschitz constant when smooth, None when nonsmooth.
    lipschitz: float | None = None

    @abstractmethod
    def value(self, z) -> float: ...

    @abstractmethod
    def subgrad(self, z) -> np.ndarray: ...

    @property
    def smooth(self) -> bool:
        return self.lipschitz is not None

    def __call__(self, z) -> float:
        return self.value(z)


class StructuredConvex(ConvexOracle):
    """smooth(z) + terms(z) + const, either part optional."""

    def __init__(self, dim: int, smooth: Smooth | None = None,
                 terms: MaxAffineTerms | None = None, const: float = 0.0):
        self.dim = int(dim)
        if smooth is not None and smooth.dim != self.dim:
            raise DimensionMismatch("smooth part has the wrong dimension")
        if terms is not None and terms.dim != self.dim:
            raise DimensionMismatch("max-affine terms have the wrong dimension")
        self.smooth_part = smooth
        self.terms = terms
        self.const = float(const)
        if terms is None:
            self.lipschitz = 0.0 if smooth is None else smooth.lipschitz
        else:
            self.lipschitz = None

    @classmethod
    def zero(cls, dim: int) -> "StructuredConvex":
        return cls(dim)

    def shifted(self, c: float) -> "StructuredConvex":
        return StructuredConvex(self.dim, self.smooth_part, self.terms, self.const + c)

    def _check(self, z):
        z = as_vec(z, "oracle input")
        if z.size != self.dim:
            raise DimensionMismatch(f"oracle expects dimension {self.dim}, got {z.size}")
        return z

    def value(self, z) -> float:
        z = self._check(z)
        v = self.const
        if self.smooth_part is not None:
            v += self.smooth_part.value(z)
        if self.terms is not None:
            v += self.terms.value(z)
        return float(v)

    def smooth_grad(self, z) -> np.ndarray:
        if self.smooth_part is None:
            return np.zeros(self.dim)
        return self.smooth_part.grad(z)

    def subgrad(self, z) -> np.ndarray:
        z = self._check(z)
        g = self.smooth_grad(z)
        if self.terms is not None:
            g = g + self.terms.subgrad(z)
        return g

    def grad(self, z) -> np.ndarray:
        if self.terms is not None:
            raise ValueError("oracle is not smooth")
        return self.subgrad(z)


class FunctionOracle(ConvexOracle):
    """Oracle from plain callables (tests, toy models, planted faults)."""

    def __init__(self, dim: int, value: Callable, subgrad: Callable,
                 lipschitz: float | None = None):
        self.dim = int(dim)
        self._value = value
        self._subgrad = subgrad
        self.lipschitz = lipschitz

    def value(self, z) -> float:
        return float(self._value(as_vec(z, "oracle input")))

    def subgrad(self, z) -> np.ndarray:
        return np.asarray(self._subgrad(as_vec(z, "oracle input")), dtype=float).reshape(-1)


def subgrad_check(f: ConvexOracle, z, xi, probes: Iterable, tol: float) -> bool:
    """True iff f(p) >= f(z) + <xi, p - z> - tol for every probe p."""
    z = as_vec(z, "z")
    xi = as_vec(xi, "xi")
    fz = f.value(z)
    for p in probes:
        p = as_vec(p, "probe")
        if p.size != z.size:
            raise DimensionMismatch("probe dimension differs from z")
        if f.value(p) < fz + xi @ (p - z) - tol:
            return False
    return True


def descent_lemma_check(f: ConvexOracle, pairs: Iterable, tol: float = 1e-9) -> bool:
    """Upper quadratic bound f(b) <= f(a) + <grad f(a), b-a> + L/2 |b-a|^2."""
    if f.lipschitz is None:
        raise ValueError("oracle is not tagged smooth")
    L = f.lipschitz
    for a, b in pairs:
        a, b = as_vec(a), as_vec(b)
        d = b - a
        if f.value(b) > f.value(a) + f.subgrad(a) @ d + 0.5 * L * (d @ d) + tol:
            return False
    return True


class PerspectiveSquares(Smooth):
    """scale * |R z - s|^2 / z[mu], jointly convex for z[mu] > 0.

    ``R`` must not touch the ``mu`` column.  With ``R`` a coordinate selection
    and ``s = 0`` this is the quadratic-over-linear term |w|^2 / mu.
    """

    def __init__(self, R: sp.spmatrix, s, mu_index: int, scale: float = 1.0):
        self.R = sp.csr_matrix(R, dtype=float)
        self.dim = self.R.shape[1]
        self.s = np.zeros(self.R.shape[0]) if s is None else np.asarray(s, dtype=float)
        self.mu = int(mu_index)
        if self.R[:, self.mu].nnz:
            raise ValueError("R must not involve the scaling coordinate")
        self.scale = float(scale)
        self.RtR = (self.R.T @ self.R).tocsr()
        self.lipschitz = None

    def in_domain(self, z):
        return bool(z[self.mu] > 0)

    def _res(self, z):
        if not z[self.mu] > 0:
            raise ValueError("perspective term evaluated at a nonpositive scale")
        return self.R @ z - self.s, float(z[self.mu])

    def value(self, z):
        r, mu = self._res(z)
        return self.scale * float(r @ r) / mu

    def grad(self, z):
        r, mu = self._res(z)
        g = (2.0 * self.scale / mu) * (self.R.T @ r)
        g[self.mu] -= self.scale * float(r @ r) / mu**2
        return g

    def hess(self, z):
        r, mu = self._res(z)
        c = self.scale
        H = (2.0 * c / mu) * self.RtR
        u = -(2.0 * c / mu**2) * (self.R.T @ r)
        k = np.flatnonzero(u)
        n = self.dim
        rows = np.concatenate([k, np.full(k.size, self.mu), [self.mu]])
        cols = np.concatenate([np.full(k.size, self.mu), k, [self.mu]])
        vals = np.concatenate([u[k], u[k], [2.0 * c * float(r @ r) / mu**3]])
        return (H + sp.csr_matrix((vals, (rows, cols)), shape=(n, n))).tocsr()
