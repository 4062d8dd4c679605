"""Slack reformulation of max-affine terms into interior-point programs.

Every term ``weight_j * max_k (M_k z + o_k)`` becomes a variable ``r_j`` with
rows ``M_k z + o_k - r_j <= 0``; constant pieces turn into the lower bound
``r_j >= max o_k``.  The builder keeps the index bookkeeping needed to read
piece weights back out of a certificate.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .convex import Box, Embedded, MaxAffineTerms, Quadratic, Smooth, SmoothSum
from .ipm import KktCertificate, SmoothConvexProgram


@dataclass(frozen=True)
class TermBlock:
    """Where one family of max-affine terms landed in the slack program."""

    terms: MaxAffineTerms
    r: np.ndarray            # variable index of r_j
    piece_row: np.ndarray    # row index of piece k, or -1 for constant pieces
    bound_piece: np.ndarray  # per term: index of the constant piece giving r's bound, or -1

    def raw_weights(self, cert: KktCertificate) -> np.ndarray:
        """Unnormalized per-piece multipliers read from the certificate."""
        pi = np.zeros(self.piece_row.size)
        rows = self.piece_row >= 0
        pi[rows] = cert.duals[self.piece_row[rows]]
        has = self.bound_piece >= 0
        pi[self.bound_piece[has]] += cert.lower_duals[self.r[has]]
        return pi

    def selection(self, cert: KktCertificate, scale: float = 1.0) -> np.ndarray:
        """Per-piece convex weights; ``scale`` is the multiplier on the term sum."""
        pi = self.raw_weights(cert)
        t = self.terms
        tot = np.add.reduceat(pi, t.ptr[:-1])
        theta = pi / np.where(tot > 0, tot, 1.0)[t.term_of_piece]
        # terms carrying no multiplier mass: fall back to the oracle's choice
        dead = np.flatnonzero(tot <= 0)
        if dead.size:
            fb = t.selection(cert.primal[: t.dim])
            for j in dead:
                theta[t.ptr[j]:t.ptr[j + 1]] = fb[t.ptr[j]:t.ptr[j + 1]]
        return theta


class ProgramBuilder:
    """Accumulates variables, rows and objective parts of a slack program."""

    def __init__(self, box: Box, x0=None):
        self.n_base = box.dim
        self.lo = [np.asarray(box.lo, float)]
        self.hi = [np.asarray(box.hi, float)]
        self.x0 = [np.zeros(box.dim) if x0 is None else np.asarray(x0, float)]
        self.nvar = box.dim
        self._rows: list[tuple[np.ndarray, np.ndarray, np.ndarray]] = []
        self._rhs: list[np.ndarray] = []
        self.mrow = 0
        self.smooth: list[Smooth] = []   # on the base block
        self.lin: dict[int, float] = {}
        self.const = 0.0
        self.nonlinear: list[tuple[Smooth | None, dict, float]] = []

    def add_vars(self, k: int, lo, hi, x0) -> np.ndarray:
        idx = self.nvar + np.arange(k)
        self.lo.append(np.broadcast_to(np.asarray(lo, float), (k,)).copy())
        self.hi.append(np.broadcast_to(np.asarray(hi, float), (k,)).copy())
        self.x0.append(np.broadcast_to(np.asarray(x0, float), (k,)).copy())
        self.nvar += k
        return idx

    def add_rows(self, A_base: sp.spmatrix | None, b, extra=None) -> np.ndarray:
        """Rows ``A_base z + sum extra <= b``; ``extra`` is (row, col, val) triplets."""
        b = np.asarray(b, float).reshape(-1)
        m = b.size
        r, c, v = [], [], []
        if A_base is not None:
            coo = sp.coo_matrix(A_base)
            r.append(coo.row), c.append(coo.col), v.append(coo.data)
        if extra is not None:
            r.append(extra[0]), c.append(extra[1]), v.append(extra[2])
        if r:
            self._rows.append((np.concatenate(r) + self.mrow, np.concatenate(c),
                               np.concatenate(v)))
        self._rhs.append(b)
        idx = self.mrow + np.arange(m)
        self.mrow += m
        return idx

    def add_linear_objective(self, idx, coef) -> None:
        for i, c in zip(np.atleast_1d(idx), np.broadcast_to(coef, np.shape(np.atleast_1d(idx)))):
            self.lin[int(i)] = self.lin.get(int(i), 0.0) + float(c)

    def add_terms(self, terms: MaxAffineTerms, z_ref: np.ndarray, offset_shift=None) -> TermBlock:
        """Create r_j for each term; pieces become rows on the base block."""
        off = terms.offset if offset_shift is None else terms.offset + offset_shift
        M = terms.M
        tp = terms.term_of_piece
        const = np.diff(M.indptr) == 0
        J = terms.n_terms
        bound = np.full(J, -np.inf)
        bound_piece = np.full(J, -1)
        for k in np.flatnonzero(const):
            j = tp[k]
            if off[k] > bound[j]:
                bound[j] = off[k]
                bound_piece[j] = k
        pv = M @ z_ref + off
        start = np.maximum.reduceat(pv, terms.ptr[:-1]) + 1.0
        r = self.add_vars(J, bound, np.inf, start)
        rows_k = np.flatnonzero(~const)
        sub = M[rows_k]
        coo = sub.tocoo()
        nr = rows_k.size
        extra = (np.arange(nr), r[tp[rows_k]], -np.ones(nr))
        piece_row = np.full(M.shape[0], -1)
        if nr:
            piece_row[rows_k] = self.add_rows(sp.coo_matrix((coo.data, (coo.row, coo.col)),
                                                            shape=(nr, self.n_base)),
                                              -off[rows_k], extra)
        return TermBlock(terms, r, piece_row, bound_piece)

    def add_nonlinear(self, smooth_base: Smooth | None, lin: dict, const: float) -> int:
        """Row ``smooth_base(z) + sum lin[i] x_i + const <= 0``; returns its index."""
        self.nonlinear.append((smooth_base, dict(lin), float(const)))
        return len(self.nonlinear) - 1

    def _lift(self, smooth: Smooth | None, lin: dict, const: float) -> Smooth:
        n = self.nvar
        q = np.zeros(n)
        for i, c in lin.items():
            q[i] += c
        parts: list[Smooth] = [Quadratic(sp.csr_matrix((n, n)), q, const)]
        if smooth is not None:
            parts.append(Embedded(smooth, np.arange(self.n_base), n))
        return parts[0] if len(parts) == 1 else SmoothSum(parts)

    def build(self) -> SmoothConvexProgram:
        n = self.nvar
        if self._rows:
            r = np.concatenate([t[0] for t in self._rows])
            c = np.concatenate([t[1] for t in self._rows])
            v = np.concatenate([t[2] for t in self._rows])
            A = sp.csr_matrix((v, (r, c)), shape=(self.mrow, n))
        else:
            A = sp.csr_matrix((self.mrow, n))
        b = np.concatenate(self._rhs) if self._rhs else np.zeros(0)
        obj_smooth = SmoothSum(self.smooth) if len(self.smooth) > 1 else (
            self.smooth[0] if self.smooth else None)
        objective = self._lift(obj_smooth, self.lin, self.const)
        nonlinear = tuple(self._lift(s, lin, c) for s, lin, c in self.nonlinear)
        scale = np.array([1.0 + abs(c) for _, _, c in self.nonlinear])
        box = Box(np.concatenate(self.lo), np.concatenate(self.hi))
        return SmoothConvexProgram(objective, box, A, b, nonlinear, np.concatenate(self.x0), scale)
