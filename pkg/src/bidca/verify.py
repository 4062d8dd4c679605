"""Runtime invariant suites.

Each check returns a ``CheckResult``; failures are report content, never
exceptions.  The ``fast`` scope uses the toy instances only, ``full`` adds
denser sampling and a small SVM run with sufficient-decrease assertions on.

``plant_fault=True`` doubles every value-function subgradient handed to the
subgradient checks, which must then report a failure.
"""
from __future__ import annotations

import io
import logging
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .bilevel import BilevelProblem, ValueFunction, run_bilevel
from .convex import Box, ConvexOracle, Quadratic, hinge, project_box, subgrad_check
from .data import Dataset, fold_plan, parse_libsvm, write_libsvm
from .dca import DcaParams
from .ipm import SmoothConvexProgram, ip_solve
from .models import svm
from .models.toys import build_toy

log = logging.getLogger(__name__)

SCOPES = ("fast", "full")
VALUE_TOL = 1e-10     # lower-level accuracy used when sampling v


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<34} {self.detail} ({self.seconds:.1f} s)"


# ---------------------------------------------------------------------------
# sampling helpers


def sample_box(box: Box, rng: np.random.Generator, span: float = 2.0) -> np.ndarray:
    """Uniform point of the box with infinite sides cut to [-span, span]."""
    lo = np.where(np.isfinite(box.lo), box.lo, -span)
    hi = np.where(np.isfinite(box.hi), box.hi, span)
    lo = np.minimum(lo, hi)
    return rng.uniform(lo, hi)


def interior_box(box: Box, shrink: float = 0.05) -> Box:
    """The box pulled in by ``shrink`` of its width on each finite side."""
    w = np.where(np.isfinite(box.hi - box.lo), box.hi - box.lo, 0.0)
    return Box(box.lo + shrink * w, box.hi - shrink * w)


def small_svm_problem(seed: int = 3, rows: int = 36, n: int = 3) -> BilevelProblem:
    """Three-fold SVM model on a noisy linearly generated set."""
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1.0, 1.0, size=(rows, n))
    score = A @ np.linspace(1.0, -0.5, n) + 0.3 * rng.standard_normal(rows)
    data = Dataset(np.where(score >= 0, 1.0, -1.0), sp.csr_matrix(A), name="synthetic-svm")
    return svm.build_svm_cv(data, fold_plan(data, 3, seed))


class ScaledSubgradient(ConvexOracle):
    """Wraps an oracle and multiplies its subgradients (the planted fault)."""

    def __init__(self, inner: ConvexOracle, factor: float):
        self.inner = inner
        self.factor = factor
        self.dim = inner.dim
        self.lipschitz = None

    def value(self, z) -> float:
        return self.inner.value(z)

    def subgrad(self, z) -> np.ndarray:
        return self.factor * self.inner.subgrad(z)


class XOracle(ConvexOracle):
    """v as a function of x alone."""

    def __init__(self, v: ValueFunction):
        self.v = v
        self.dim = v.p.nx
        self.lipschitz = None

    def value(self, x) -> float:
        return self.v.value_x(x)

    def subgrad(self, x) -> np.ndarray:
        return self.v.subgrad_x(x)


# ---------------------------------------------------------------------------
# value-function checks


def value_convexity(p: BilevelProblem, rng, pairs: int, tol: float = 1e-6,
                    thetas=(0.25, 0.5, 0.75)) -> tuple[bool, float]:
    """v(t a + (1-t) b) <= t v(a) + (1-t) v(b) + tol on random pairs; returns (ok, worst excess)."""
    v = ValueFunction(p, VALUE_TOL)
    worst = -np.inf
    for _ in range(pairs):
        a, b = sample_box(p.X, rng), sample_box(p.X, rng)
        va, vb = v.value_x(a), v.value_x(b)
        for t in thetas:
            excess = v.value_x(t * a + (1 - t) * b) - (t * va + (1 - t) * vb)
            worst = max(worst, excess)
    return bool(worst <= tol), float(worst)


def value_subgradient_probes(p: BilevelProblem, rng, points: int, probes: int,
                             tol: float = 1e-6, factor: float = 1.0) -> tuple[bool, float]:
    """v(x') >= v(x) + <xi1, x' - x> - tol for random x and probes x'."""
    v = ValueFunction(p, VALUE_TOL)
    f = XOracle(v) if factor == 1.0 else ScaledSubgradient(XOracle(v), factor)
    ok, worst = True, -np.inf
    for _ in range(points):
        x = sample_box(interior_box(p.X), rng)
        xi = f.subgrad(x)
        vx = f.value(x)
        probe_pts = [sample_box(p.X, rng) for _ in range(probes)]
        ok &= subgrad_check(f, x, xi, probe_pts, tol)
        for q in probe_pts:
            worst = max(worst, vx + xi @ (q - x) - f.value(q))
    return bool(ok), float(worst)


def value_finite_differences(p: BilevelProblem, rng, points: int, h: float = 1e-5,
                             tol: float = 1e-3) -> tuple[bool, float]:
    """xi1 against central differences of v at random interior x."""
    v = ValueFunction(p, VALUE_TOL)
    worst = 0.0
    for _ in range(points):
        x = sample_box(interior_box(p.X, 0.1), rng)
        xi = v.subgrad_x(x)
        fd = np.empty(p.nx)
        for i in range(p.nx):
            e = np.zeros(p.nx)
            e[i] = h * max(1.0, abs(x[i]))
            fd[i] = (v.value_x(x + e) - v.value_x(x - e)) / (2 * e[i])
        worst = max(worst, float(np.max(np.abs(fd - xi) / (1.0 + np.abs(fd)))))
    return bool(worst <= tol), worst


# ---------------------------------------------------------------------------
# primitive and engine checks


def box_projection(rng, pairs: int = 100) -> tuple[bool, str]:
    box = Box(np.array([-1.0, 0.0, -np.inf]), np.array([1.0, np.inf, 2.0]))
    for _ in range(pairs):
        a, b = 3 * rng.standard_normal(3), 3 * rng.standard_normal(3)
        pa, pb = project_box(a, box), project_box(b, box)
        if not np.array_equal(project_box(pa, box), pa):
            return False, "projection not idempotent"
        if np.linalg.norm(pa - pb) > np.linalg.norm(a - b) + 1e-12:
            return False, "projection expands distances"
    return True, f"{pairs} pairs"


def hinge_midpoints(rng, pairs: int = 200) -> tuple[bool, str]:
    for _ in range(pairs):
        u, w = 4 * rng.standard_normal(2)
        if hinge(0.5 * (u + w)) > 0.5 * (hinge(u) + hinge(w)) + 1e-12:
            return False, f"midpoint inequality fails at {u}, {w}"
    return True, f"{pairs} pairs"


def model_oracles(problems: dict[str, BilevelProblem], rng, pairs: int = 100,
                  tol: float = 1e-9) -> tuple[bool, str]:
    """Every shipped F1 and f passes the subgradient inequality."""
    for name, p in problems.items():
        box = p.X.concat(p.Y)
        for label, f in (("F1", p.F1), ("f", p.f)):
            for _ in range(pairs):
                z = sample_box(box, rng)
                q = sample_box(box, rng)
                if not subgrad_check(f, z, f.subgrad(z), [q], tol * max(1.0, abs(f.value(q)))):
                    return False, f"{name}.{label} fails at a sampled pair"
    return True, f"{len(problems)} models x {pairs} pairs"


def dual_sensitivity(rng, instances: int = 5, delta: float = 1e-5,
                     tol: float = 1e-3) -> tuple[bool, str]:
    """Perturbing b_i by delta moves the optimal value by about -dual_i * delta."""
    worst = 0.0
    for _ in range(instances):
        n, m = 3, 4
        M = rng.standard_normal((n, n))
        obj = Quadratic(M @ M.T + np.eye(n), rng.standard_normal(n))
        A = rng.standard_normal((m, n))
        b = rng.uniform(0.1, 1.0, m)
        box = Box.free(n)
        base = ip_solve(SmoothConvexProgram(obj, box, sp.csr_matrix(A), b), tol=1e-11)
        for i in range(m):
            bp = b.copy()
            bp[i] += delta
            moved = ip_solve(SmoothConvexProgram(obj, box, sp.csr_matrix(A), bp), tol=1e-11)
            predicted = -base.duals[i] * delta
            worst = max(worst, abs((moved.objective - base.objective) - predicted) / delta)
    return worst <= tol, f"worst slope error {worst:.1e}"


def random_libsvm_line(rng, n_max: int = 40) -> str:
    label = rng.choice(["+1", "-1", "1", "-1.0"])
    k = int(rng.integers(0, 8))
    idx = np.sort(rng.choice(np.arange(1, n_max + 1), size=k, replace=False))
    parts = [label]
    for i in idx:
        kind = rng.integers(0, 3)
        if kind == 0:
            val = str(int(rng.integers(-5, 6)))
        elif kind == 1:
            val = repr(float(rng.standard_normal()))
        else:
            val = f"{rng.standard_normal():.3e}"
        parts.append(f"{i}:{val}")
    return " ".join(parts)


def libsvm_round_trip(rng, lines: int) -> tuple[bool, str]:
    text = "\n".join(random_libsvm_line(rng) for _ in range(lines)) + "\n"
    first = parse_libsvm(io.StringIO(text))
    buf = io.StringIO()
    write_libsvm(first, buf)
    second = parse_libsvm(io.StringIO(buf.getvalue()), n_features=first.n)
    return first.equals(second), f"{lines} lines"


def sufficient_decrease(cases, params: DcaParams) -> tuple[bool, str]:
    """Run each (problem, variant, eps) with runtime decrease assertions on."""
    runs = 0
    for p, variant, eps in cases:
        res = run_bilevel(p, eps, params, variant)
        if res.status == "SufficientDecreaseViolation" or res.trace.decrease_violations:
            return False, f"{p.name} {variant}: sufficient decrease violated"
        if res.status != "converged":
            return False, f"{p.name} {variant}: {res.status}"
        runs += 1
    return True, f"{runs} runs, no violations"


# ---------------------------------------------------------------------------
# suites


def _timed(name: str, fn: Callable[[], tuple[bool, object]]) -> CheckResult:
    t0 = time.perf_counter()
    try:
        ok, detail = fn()
        if isinstance(detail, float):
            detail = f"worst {detail:.2e}"
    except Exception as exc:    # a crashing check is a failed check
        ok, detail = False, f"{type(exc).__name__}: {exc}"
    return CheckResult(name, bool(ok), str(detail), time.perf_counter() - t0)


def run_suite(scope: str = "fast", plant_fault: bool = False, seed: int = 0) -> list[CheckResult]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}")
    full = scope == "full"
    rng = np.random.default_rng(seed)
    toys = {name: build_toy(name) for name in ("clamp", "quadratic", "lasso")}
    models = dict(toys)
    if full:
        models["svm"] = small_svm_problem()
    factor = 2.0 if plant_fault else 1.0
    pairs = 50 if full else 10
    probes = 20 if full else 10
    results = [
        _timed("box projection", lambda: box_projection(rng)),
        _timed("hinge convexity", lambda: hinge_midpoints(rng)),
        _timed("model oracle subgradients", lambda: model_oracles(models, rng, 100 if full else 30)),
        _timed("dual sensitivity", lambda: dual_sensitivity(rng, 5 if full else 2)),
        _timed("libsvm round trip", lambda: libsvm_round_trip(rng, 1000 if full else 200)),
    ]
    for name, p in models.items():
        results.append(_timed(f"value convexity [{name}]",
                              lambda p=p: value_convexity(p, rng, pairs)))
        results.append(_timed(f"value subgradient [{name}]",
                              lambda p=p: value_subgradient_probes(p, rng, 5 if full else 3,
                                                                   probes, factor=factor)))
    results.append(_timed("value finite differences [lasso]",
                          lambda: value_finite_differences(toys["lasso"], rng, 10 if full else 3)))
    params = DcaParams(tol=1e-6, max_iter=500, debug=True)
    cases = [(toys["clamp"], "ipdca", 1e-4), (toys["clamp"], "ipldca", 1e-4),
             (toys["quadratic"], "ipdca", 1e-4)]
    results.append(_timed("sufficient decrease [toys]", lambda: sufficient_decrease(cases, params)))
    if full:
        svm_params = DcaParams(tol=1e-2, stopping="paper", max_iter=200, debug=True)
        p = models["svm"]
        results.append(_timed("sufficient decrease [svm]", lambda: sufficient_decrease(
            [(p, "ipdca", 1e-2)], svm_params)))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [r.line() for r in results]
    failed = sum(not r.passed for r in results)
    lines.append(f"{len(results) - failed} passed, {failed} failed")
    return "\n".join(lines)
