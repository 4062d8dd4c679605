"""Inexact proximal DC algorithms for

    min g0(z) - h0(z)  over z in Sigma  s.t.  g1(z) - h1(z) <= 0,

where Sigma is a box intersected with linear rows ``A z <= b``.

Two variants are provided: the proximal one (``"ipdca"``) keeps g1 exact in
the subproblem, the linearized one (``"ipldca"``) replaces a smooth g1 by its
first-order model and scales the proximal weight with the penalty.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import IO

import numpy as np
import scipy.sparse as sp
from scipy.optimize import nnls

from .convex import Box, ConvexOracle, Quadratic, StructuredConvex, as_vec
from .errors import (ConfigError, MaxIterations, PenaltyUnbounded, SolverError,
                     StructureMissing, SubproblemFailure)
from .ipm import DEFAULT_TOL, KktCertificate, SmoothConvexProgram, ip_solve
from .slack import ProgramBuilder, TermBlock

log = logging.getLogger(__name__)

VARIANTS = ("ipdca", "ipldca")
CRITERIA = ("summable", "step")
STOPPING = ("algorithm", "paper")
DECREASE_SLACK = 1e-8
ACTIVE_TOL = 1e-6
STALL_FEASIBILITY = 1e-6     # largest row violation accepted from a stalled solve


@dataclass(frozen=True)
class DcProblem:
    g0: ConvexOracle
    h0: ConvexOracle
    g1: ConvexOracle
    h1: ConvexOracle
    box: Box
    A: sp.csr_matrix | None = None
    b: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        n = self.box.dim
        for nm in ("g0", "h0", "g1", "h1"):
            if getattr(self, nm).dim != n:
                raise ValueError(f"{nm} has dimension {getattr(self, nm).dim}, expected {n}")
        if self.A is None:
            object.__setattr__(self, "A", sp.csr_matrix((0, n)))
            object.__setattr__(self, "b", np.zeros(0))
        else:
            object.__setattr__(self, "A", sp.csr_matrix(self.A, dtype=float))
            object.__setattr__(self, "b", as_vec(self.b, "b"))

    @property
    def dim(self) -> int:
        return self.box.dim

    def in_sigma(self, z, tol: float = 1e-9) -> bool:
        if not self.box.contains(z, tol):
            return False
        return bool(np.all(self.A @ z - self.b <= tol * (1.0 + np.abs(self.b))))

    def merit(self, z, beta: float, h0z: float | None = None, h1z: float | None = None) -> float:
        h0z = self.h0.value(z) if h0z is None else h0z
        h1z = self.h1.value(z) if h1z is None else h1z
        return self.g0.value(z) - h0z + beta * max(self.g1.value(z) - h1z, 0.0)


@dataclass(frozen=True)
class DcaParams:
    rho: float = 1e-2
    sigma: float = 1e-2
    L: float | None = None
    beta0: float = 1.0
    delta_beta: float = 5.0
    criterion: str = "summable"
    zeta0: float = 1e-2
    tol: float = 1e-4
    max_iter: int = 500
    beta_max: float = 1e6
    stopping: str = "algorithm"
    t_tol: float = 1e-4
    ip_tol: float = DEFAULT_TOL
    debug: bool = False

    def __post_init__(self):
        for nm in ("rho", "sigma", "beta0", "delta_beta", "zeta0", "tol", "beta_max",
                   "t_tol", "ip_tol"):
            v = getattr(self, nm)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v > 0):
                raise ConfigError(f"{nm} must be a positive finite number, got {v!r}")
        if self.L is not None and not self.L >= 0:
            raise ConfigError("L must be nonnegative")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}")
        if self.stopping not in STOPPING:
            raise ConfigError(f"stopping must be one of {STOPPING}")
        if not (isinstance(self.max_iter, int) and self.max_iter >= 1):
            raise ConfigError("max_iter must be a positive integer")
        if self.beta0 > self.beta_max:
            raise ConfigError("beta0 exceeds beta_max")


@dataclass
class IterationRecord:
    k: int
    z: list
    beta: float
    rho: float
    t: float
    step: float
    merit: float
    merit_next: float
    residual: float
    bound: float
    lam_tilde: float
    penalty_increased: bool
    decrease_margin: float
    ip_iterations: int
    ip_tol: float


@dataclass
class Trace:
    problem: str = ""
    variant: str = ""
    records: list = field(default_factory=list)
    reason: str = ""
    kkt: dict = field(default_factory=dict)
    lam: float = float("nan")
    elapsed: float = 0.0

    @property
    def iterations(self) -> int:
        return len(self.records)

    @property
    def beta_final(self) -> float:
        return self.records[-1].beta if self.records else float("nan")

    @property
    def kkt_residual(self) -> float:
        return self.kkt.get("residual", float("nan"))

    @property
    def decrease_violations(self) -> int:
        return sum(1 for r in self.records if r.decrease_margin < 0)

    def write_jsonl(self, fh: IO[str]) -> None:
        for r in self.records:
            fh.write(json.dumps({"type": "iteration", **asdict(r)}) + "\n")
        fh.write(json.dumps({"type": "summary", "problem": self.problem,
                             "variant": self.variant, "reason": self.reason,
                             "iterations": self.iterations, "lambda": self.lam,
                             "kkt": self.kkt}) + "\n")


class SufficientDecreaseViolation(AssertionError):
    pass


class DcaFailure(SolverError):
    """Wraps a solver error together with the last iterate and the trace."""

    def __init__(self, cause: SolverError, z: np.ndarray, trace: Trace):
        super().__init__(str(cause))
        self.cause = cause
        self.z = z
        self.trace = trace


# ---------------------------------------------------------------------------
# subproblems


@dataclass(frozen=True)
class Subproblem:
    program: SmoothConvexProgram
    problem: DcProblem
    zk: np.ndarray
    xi0: np.ndarray
    xi1: np.ndarray
    beta: float
    rho: float
    h0k: float
    h1k: float
    s_index: int
    max_row: tuple        # ("nonlinear" | "linear", index)
    g0_block: TermBlock | None
    g1_block: TermBlock | None
    linearized: bool
    g1k: float
    grad_g1k: np.ndarray | None
    sigma_rows: np.ndarray

    def gap(self, z) -> float:
        """Argument of the max term evaluated with the exact oracles."""
        d = z - self.zk
        if self.linearized:
            base = self.g1k + self.grad_g1k @ d
        else:
            base = self.problem.g1.value(z)
        return float(base - self.h1k - self.xi1 @ d)

    def value(self, z) -> float:
        d = z - self.zk
        return float(self.problem.g0.value(z) - self.h0k - self.xi0 @ d
                     + self.beta * max(self.gap(z), 0.0) + 0.5 * self.rho * (d @ d))


def _structured(f: ConvexOracle, name: str) -> StructuredConvex:
    if isinstance(f, StructuredConvex):
        return f
    raise StructureMissing(f"{name} needs a smooth-plus-max-affine description")


def _is_affine(g: StructuredConvex) -> bool:
    s = g.smooth_part
    return s is None or (isinstance(s, Quadratic) and s.P.nnz == 0)


def _base_builder(p: DcProblem, zk, xi0, beta, rho, h0k):
    g0 = _structured(p.g0, "g0")
    n = p.dim
    B = ProgramBuilder(p.box, zk)
    prox = Quadratic(rho * sp.identity(n, format="csr"), -rho * zk, 0.5 * rho * (zk @ zk))
    if g0.smooth_part is not None:
        B.smooth.append(g0.smooth_part)
    B.smooth.append(prox)
    B.add_linear_objective(np.arange(n), -xi0)
    B.const += g0.const - h0k + float(xi0 @ zk)
    g0_block = None
    if g0.terms is not None:
        g0_block = B.add_terms(g0.terms, zk)
        B.add_linear_objective(g0_block.r, g0.terms.weight)
    sigma_rows = B.add_rows(p.A, p.b) if p.A.shape[0] else np.zeros(0, int)
    return B, g0_block, sigma_rows


def build_subproblem(p: DcProblem, zk, xi0, xi1, beta: float, rho: float,
                     h1k: float | None = None, h0k: float = 0.0) -> Subproblem:
    """Slack program for the proximal subproblem around ``zk``."""
    zk, xi0, xi1 = as_vec(zk), as_vec(xi0), as_vec(xi1)
    g1 = _structured(p.g1, "g1")
    h1k = p.h1.value(zk) if h1k is None else float(h1k)
    B, g0_block, sigma_rows = _base_builder(p, zk, xi0, beta, rho, h0k)
    n = p.dim
    gap_k = g1.value(zk) - h1k
    s = int(B.add_vars(1, 0.0, np.inf, max(gap_k, 0.0) + 1.0)[0])
    B.add_linear_objective(s, beta)
    lin = {s: -1.0}
    for i in np.flatnonzero(xi1):
        lin[int(i)] = -float(xi1[i])
    const = g1.const - h1k + float(xi1 @ zk)
    g1_block = None
    if g1.terms is not None:
        g1_block = B.add_terms(g1.terms, zk)
        for j, wj in zip(g1_block.r, g1.terms.weight):
            lin[int(j)] = lin.get(int(j), 0.0) + float(wj)
    if _is_affine(g1):
        if g1.smooth_part is not None:
            for i, c in enumerate(g1.smooth_part.q):
                if c:
                    lin[i] = lin.get(i, 0.0) + float(c)
            const += g1.smooth_part.c
        cols = np.array(sorted(lin))
        row = B.add_rows(None, [-const],
                         (np.zeros(cols.size, int), cols, np.array([lin[c] for c in cols])))
        max_row = ("linear", int(row[0]))
    else:
        max_row = ("nonlinear", B.add_nonlinear(g1.smooth_part, lin, const))
    return Subproblem(B.build(), p, zk, xi0, xi1, float(beta), float(rho), float(h0k),
                      h1k, s, max_row, g0_block, g1_block, False, float(g1.value(zk)), None,
                      sigma_rows)


def build_linearized_subproblem(p: DcProblem, zk, xi0, xi1, beta: float, rho_k: float,
                                h1k: float | None = None, h0k: float = 0.0) -> Subproblem:
    """Subproblem with g1 replaced by its gradient model at ``zk``."""
    if not p.g1.smooth:
        raise StructureMissing("linearized subproblem needs an L-smooth g1")
    zk, xi0, xi1 = as_vec(zk), as_vec(xi0), as_vec(xi1)
    h1k = p.h1.value(zk) if h1k is None else float(h1k)
    B, g0_block, sigma_rows = _base_builder(p, zk, xi0, beta, rho_k, h0k)
    g1k = p.g1.value(zk)
    grad = p.g1.subgrad(zk)
    s = int(B.add_vars(1, 0.0, np.inf, max(g1k - h1k, 0.0) + 1.0)[0])
    B.add_linear_objective(s, beta)
    a = grad - xi1
    const = g1k - h1k - float(a @ zk)
    cols = np.concatenate([np.flatnonzero(a), [s]])
    vals = np.concatenate([a[np.flatnonzero(a)], [-1.0]])
    row = B.add_rows(None, [-const], (np.zeros(cols.size, int), cols, vals))
    return Subproblem(B.build(), p, zk, xi0, xi1, float(beta), float(rho_k), float(h0k),
                      h1k, s, ("linear", int(row[0])), g0_block, None, True, float(g1k), grad,
                      sigma_rows)


@dataclass(frozen=True)
class SubgradientCertificate:
    z: np.ndarray
    e: np.ndarray
    lam_tilde: float
    eta0: np.ndarray
    eta1: np.ndarray
    normal: np.ndarray


def _max_dual(sub: Subproblem, cert: KktCertificate) -> float:
    kind, i = sub.max_row
    return float(cert.nonlinear_duals[i] if kind == "nonlinear" else cert.duals[i])


def _eta(g: StructuredConvex, block: TermBlock | None, cert: KktCertificate, z) -> np.ndarray:
    eta = g.smooth_grad(z)
    if g.terms is not None:
        theta = block.selection(cert) if block is not None else g.terms.selection(z)
        eta = eta + g.terms.combine(theta)
    return eta


def extract_subgradient_certificate(cert: KktCertificate, sub: Subproblem) -> SubgradientCertificate:
    """Assemble e in the subdifferential of the subproblem objective plus N_Sigma.

    Piece weights are the normalized row multipliers, the max-term weight is
    the max-row multiplier divided by beta (clipped to [0, 1]), and the normal
    cone element collects the Sigma-row and box multipliers.  Up to the
    normalization the result equals the z-block of the certificate's
    stationarity residual.
    """
    p = sub.problem
    n = p.dim
    if cert.primal.size != sub.program.n:
        raise ValueError("certificate does not belong to this subproblem")
    z = cert.primal[:n].copy()
    lam_t = float(np.clip(_max_dual(sub, cert) / sub.beta, 0.0, 1.0))
    eta0 = _eta(p.g0, sub.g0_block, cert, z)
    if sub.linearized:
        eta1 = sub.grad_g1k
    else:
        eta1 = _eta(p.g1, sub.g1_block, cert, z)
    normal = cert.box_duals[:n].copy()
    if p.A.shape[0]:
        normal += p.A.T @ cert.duals[sub.sigma_rows]
    e = (eta0 - sub.xi0 + sub.rho * (z - sub.zk)
         + sub.beta * lam_t * (eta1 - sub.xi1) + normal)
    return SubgradientCertificate(z, e, lam_t, eta0, eta1, normal)


def compute_t(gap: float) -> float:
    gap = float(gap)
    if not math.isfinite(gap):
        raise ValueError("gap must be finite")
    return max(gap, 0.0)


def update_penalty(beta: float, t_next: float, step_norm: float, delta_beta: float) -> float:
    """Increase beta by delta_beta iff max(beta, 1/t) < 1/step (1/0 = inf)."""
    inv_t = math.inf if t_next == 0 else 1.0 / t_next
    inv_s = math.inf if step_norm == 0 else 1.0 / step_norm
    return beta + delta_beta if max(beta, inv_t) < inv_s else beta


# ---------------------------------------------------------------------------
# KKT residual


def normal_cone_distance(v: np.ndarray, p: DcProblem, z: np.ndarray,
                         tol: float = ACTIVE_TOL) -> float:
    """dist(0, v + N_Sigma(z)) using the constraints active within ``tol``."""
    n = p.dim
    cols = []
    lo, hi = p.box.lo, p.box.hi
    for i in np.flatnonzero(np.isfinite(lo) & (z - lo <= tol * (1 + np.abs(lo)))):
        c = np.zeros(n)
        c[i] = -1.0
        cols.append(c)
    for i in np.flatnonzero(np.isfinite(hi) & (hi - z <= tol * (1 + np.abs(hi)))):
        c = np.zeros(n)
        c[i] = 1.0
        cols.append(c)
    if p.A.shape[0]:
        act = np.flatnonzero(p.b - p.A @ z <= tol * (1 + np.abs(p.b)))
        for i in act:
            cols.append(p.A[i].toarray().ravel())
    if not cols:
        return float(np.linalg.norm(v))
    C = np.column_stack(cols)
    _, res = nnls(C, -v, maxiter=50 * C.shape[1] + 100)
    return float(res)


def kkt_residual(p: DcProblem, z, lam: float, sub: Subproblem | None = None,
                 cert: KktCertificate | None = None) -> dict:
    """Stationarity, complementarity and feasibility of (z, lam) for the DC program.

    Subgradients of g0/g1 use the piece weights of the final subproblem
    certificate when available (they certify which pieces are active), the
    concave parts are re-queried at ``z``.
    """
    z = as_vec(z)
    g0 = _structured(p.g0, "g0")
    g1 = _structured(p.g1, "g1")
    if sub is not None and cert is not None:
        eta0 = _eta(g0, sub.g0_block, cert, z)
        eta1 = _eta(g1, sub.g1_block if not sub.linearized else None, cert, z)
    else:
        eta0 = g0.subgrad(z)
        eta1 = g1.subgrad(z)
    xi0 = p.h0.subgrad(z)
    xi1 = p.h1.subgrad(z)
    v = eta0 - xi0 + lam * (eta1 - xi1)
    stat = normal_cone_distance(v, p, z)
    f1 = p.g1.value(z) - p.h1.value(z)
    comp = abs(lam * f1)
    feas = max(f1, 0.0)
    return {"stationarity": stat, "complementarity": comp, "feasibility": feas,
            "residual": max(stat, comp, feas), "constraint": f1}


# ---------------------------------------------------------------------------
# main loop


def _solve_sub(sub: Subproblem, bound: float, ip_tol: float):
    tol = ip_tol
    last = None
    for attempt in range(3):
        try:
            cert = ip_solve(sub.program, tol=tol)
        except MaxIterations as exc:
            # A stalled solve still certifies the criterion if its best
            # iterate is feasible and its explicit subgradient is small.
            cert = exc.certificate
            if cert is None or cert.feasibility_residual > STALL_FEASIBILITY:
                raise SubproblemFailure(f"subproblem solve failed: {exc}") from exc
            sc = extract_subgradient_certificate(cert, sub)
            if np.linalg.norm(sc.e) <= bound:
                log.debug("accepting stalled subproblem solve: %s", exc)
                return cert, sc, tol
            raise SubproblemFailure(f"subproblem solve failed: {exc} "
                                    f"(|e| = {np.linalg.norm(sc.e):.2e} > {bound:.2e})") from exc
        except SolverError as exc:
            last = exc
            tol *= 0.1
            continue
        sc = extract_subgradient_certificate(cert, sub)
        if np.linalg.norm(sc.e) <= bound:
            return cert, sc, tol
        last = None
        tol *= 0.1
    if last is not None:
        raise SubproblemFailure(f"subproblem solve failed: {last}") from last
    raise SubproblemFailure(f"inexactness bound {bound:.2e} not met "
                            f"(|e| = {np.linalg.norm(sc.e):.2e})")


def run_dca(p: DcProblem, params: DcaParams, variant: str = "ipdca", z0=None):
    """Run the DC iteration from ``z0``; returns (z, lambda, trace).

    Solver failures are raised as ``DcaFailure`` carrying the last iterate
    and the partial trace; ``.cause`` holds the underlying error class.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"variant must be one of {VARIANTS}")
    z = as_vec(z0, "z0").copy() if z0 is not None else p.box.project(np.zeros(p.dim))
    if not p.in_sigma(z, 1e-9):
        raise ValueError("starting point is not in Sigma")
    L = params.L
    if variant == "ipldca":
        if not p.g1.smooth:
            raise StructureMissing("iPL-DCA needs an L-smooth g1")
        L = p.g1.lipschitz if L is None else L
    trace = Trace(problem=p.name, variant=variant)
    t_start = time.perf_counter()
    beta = float(params.beta0)
    prev_step = None
    sub = cert = None
    lam = 0.0
    for k in range(params.max_iter):
        xi0 = p.h0.subgrad(z)
        xi1 = p.h1.subgrad(z)
        h0k = p.h0.value(z)
        h1k = p.h1.value(z)
        if variant == "ipdca":
            rho_k, c = params.rho, params.rho
            sub = build_subproblem(p, z, xi0, xi1, beta, rho_k, h1k, h0k)
        else:
            rho_k, c = 0.5 * beta * L + params.sigma, params.sigma
            sub = build_linearized_subproblem(p, z, xi0, xi1, beta, rho_k, h1k, h0k)
        if params.criterion == "step" and prev_step is not None:
            bound = math.sqrt(2.0) / 2.0 * c * prev_step
            slack_term = 0.25 * c * prev_step ** 2
        else:
            zeta = params.zeta0 / (k + 1)
            bound = zeta
            slack_term = zeta ** 2 / (2.0 * c)
        try:
            cert, sc, used_tol = _solve_sub(sub, bound, params.ip_tol)
        except SolverError as exc:
            trace.reason = type(exc).__name__
            trace.elapsed = time.perf_counter() - t_start
            raise DcaFailure(exc, z, trace) from exc
        z_new = sc.z
        lam = beta * sc.lam_tilde
        t = compute_t(sub.gap(z_new))
        step = float(np.linalg.norm(z_new - z))
        merit_k = p.g0.value(z) - h0k + beta * max(p.g1.value(z) - h1k, 0.0)
        try:
            merit_next = p.merit(z_new, beta)
        except SolverError as exc:
            trace.reason = type(exc).__name__
            raise DcaFailure(exc, z, trace) from exc
        margin = merit_k - (merit_next + 0.5 * c * step ** 2 - slack_term) + DECREASE_SLACK
        if params.stopping == "algorithm":
            stop = max(step, t) < params.tol
        else:
            stop = t < params.t_tol and step / (1.0 + np.linalg.norm(z)) < params.tol
        new_beta = beta if stop else update_penalty(beta, t, step, params.delta_beta)
        trace.records.append(IterationRecord(
            k, z.tolist(), beta, rho_k, t, step, merit_k, merit_next,
            float(np.linalg.norm(sc.e)), bound, sc.lam_tilde, new_beta > beta, margin,
            cert.iterations, used_tol))
        log.debug("k=%d beta=%g t=%.3e step=%.3e merit=%.6g", k, beta, t, step, merit_k)
        if margin < 0:
            log.warning("sufficient decrease violated at k=%d by %.3e", k, -margin)
            if params.debug:
                raise SufficientDecreaseViolation(f"iteration {k}: margin {margin:.3e}")
        z = z_new
        if stop:
            trace.reason = "converged"
            break
        if new_beta > params.beta_max:
            trace.reason = "PenaltyUnbounded"
            trace.elapsed = time.perf_counter() - t_start
            exc = PenaltyUnbounded(f"beta would exceed {params.beta_max:g}")
            raise DcaFailure(exc, z, trace) from exc
        beta = new_beta
        prev_step = step
    else:
        trace.reason = "MaxIterations"
        trace.lam = lam
        trace.elapsed = time.perf_counter() - t_start
        exc = MaxIterations(f"no convergence within {params.max_iter} iterations")
        raise DcaFailure(exc, z, trace)
    trace.lam = lam
    trace.kkt = kkt_residual(p, z, lam, sub, cert)
    trace.elapsed = time.perf_counter() - t_start
    return z, lam, trace
