import io
import json
import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from bidca.convex import Box, MaxAffineTerms, Quadratic, StructuredConvex
from bidca.dca import (DcaFailure, DcaParams, DcProblem, build_linearized_subproblem,
                       build_subproblem, compute_t, run_dca, update_penalty)
from bidca.errors import ConfigError, StructureMissing
from bidca.ipm import ip_solve

Z1 = StructuredConvex.zero(1)
SIGMA = Box.uniform(1, -5, 5)


def sq(a=1.0, q=0.0, c=0.0, n=1):
    """a |z|^2 + q'z + c."""
    return StructuredConvex(n, smooth=Quadratic(2 * a * np.eye(n), np.full(n, q), c, n))


def affine(q, c=0.0, n=1):
    return StructuredConvex(n, smooth=Quadratic(np.zeros((n, n)), np.full(n, q, dtype=float), c, n))


def absval(n=1, weight=1.0):
    return StructuredConvex(n, terms=MaxAffineTerms.abs_values(sp.identity(n, format="csr"), weight))


def test_compute_t():
    assert compute_t(0.2) == 0.2
    assert compute_t(-0.5) == 0.0
    assert compute_t(0.0) == 0.0
    with pytest.raises(ValueError):
        compute_t(math.inf)


@pytest.mark.parametrize("t, step, expected", [(0.5, 0.1, 6.0), (0.0, 0.1, 1.0), (0.5, 0.0, 6.0),
                                               (0.5, 1.0, 1.0), (0.0, 0.0, 1.0)])
def test_update_penalty(t, step, expected):
    assert update_penalty(1.0, t, step, 5.0) == expected


def test_subproblem_template():
    # g0 = z^2, g1 = z, z^k = 1, beta = 2, rho = 1:
    # min z^2 + 2 s + 0.5 (z - 1)^2  s.t.  s >= z, s >= 0
    p = DcProblem(sq(), Z1, affine(1.0), Z1, SIGMA)
    sub = build_subproblem(p, [1.0], [0.0], [0.0], 2.0, 1.0)
    prog = sub.program
    assert prog.n == 2 and sub.s_index == 1
    for z, s in [(0.3, 0.7), (-1.0, 0.0), (2.0, 4.0)]:
        x = np.array([z, s])
        assert prog.objective.value(x) == pytest.approx(z * z + 2 * s + 0.5 * (z - 1) ** 2)
    assert prog.box.lo[1] == 0.0
    kind, i = sub.max_row
    assert kind == "linear"
    assert np.allclose(prog.A[i].toarray(), [[1.0, -1.0]]) and prog.b[i] == pytest.approx(0.0)
    cert = ip_solve(prog, tol=1e-10)
    # neither smooth branch is stationary (z = 1/3 from z < 0, z = -1/3 from z > 0),
    # so the minimizer is the kink z = 0
    assert abs(cert.primal[0]) <= 1e-4


def test_concave_linearization_enters_objective():
    p = DcProblem(Z1, absval(), affine(0.0, -1.0), Z1, SIGMA)
    sub = build_subproblem(p, [2.0], [1.0], [0.0], 1.0, 1.0, h0k=2.0)
    # objective = -(2 + (z - 2)) + 0.5 (z - 2)^2 + s = -z + 0.5 (z - 2)^2 + s
    for z in (-1.0, 0.5, 3.0):
        assert sub.program.objective.value(np.array([z, 0.0])) == pytest.approx(-z + 0.5 * (z - 2) ** 2)
        assert sub.value(np.array([z])) == pytest.approx(-z + 0.5 * (z - 2) ** 2)


def test_inactive_constraint_matches_plain_prox_step():
    p = DcProblem(sq(1.0, -1.0), Z1, affine(0.0, -3.0), Z1, SIGMA)
    sub = build_subproblem(p, [2.0], [0.0], [0.0], 4.0, 0.5)
    cert = ip_solve(sub.program, tol=1e-11)
    assert cert.primal[1] <= 1e-8
    # prox step: min z^2 - z + 0.25 (z - 2)^2
    assert cert.primal[0] == pytest.approx((1 + 1.0) / (2 + 0.5), abs=1e-8)


def test_linearized_subproblem():
    g1 = sq()
    p = DcProblem(Z1, Z1, g1, Z1, SIGMA)
    sub = build_linearized_subproblem(p, [1.0], [0.0], [0.0], 3.0, 0.5 * 3.0 * 2.0 + 0.5)
    assert sub.rho == pytest.approx(3.5)
    assert g1.lipschitz == pytest.approx(2.0)
    for z in (-1.0, 0.0, 2.5):
        assert sub.gap(np.array([z])) == pytest.approx(1 + 2 * (z - 1))
    with pytest.raises(StructureMissing):
        build_linearized_subproblem(DcProblem(Z1, Z1, absval(), Z1, SIGMA), [1.0], [0.0], [0.0], 1.0, 1.0)


def test_linearized_step_equals_plain_step_on_linearized_problem():
    g1 = sq(1.0, 0.0, -0.5)
    zk, beta, rho = np.array([1.2]), 3.0, 2.0
    g0 = sq(0.5, -1.0)
    lin = DcProblem(g0, Z1, g1, Z1, SIGMA)
    a = ip_solve(build_linearized_subproblem(lin, zk, [0.0], [0.0], beta, rho).program, tol=1e-11)
    # g1 replaced by its tangent at zk
    g1k, grad = g1.value(zk), g1.subgrad(zk)
    tangent = affine(float(grad[0]), float(g1k - grad @ zk))
    b = ip_solve(build_subproblem(DcProblem(g0, Z1, tangent, Z1, SIGMA), zk, [0.0], [0.0],
                                  beta, rho).program, tol=1e-11)
    assert a.primal[0] == pytest.approx(b.primal[0], abs=1e-8)


def test_converges_to_unconstrained_minimum():
    p = DcProblem(sq(), Z1, affine(1.0, -1.0), Z1, SIGMA)
    z, lam, tr = run_dca(p, DcaParams(rho=1.0, tol=1e-7), z0=[3.0])
    assert abs(z[0]) <= 1e-5 and lam == pytest.approx(0.0, abs=1e-8)
    assert tr.records[-1].t == 0.0
    assert tr.kkt_residual <= 1e-6


@pytest.mark.parametrize("variant", ["ipdca", "ipldca"])
@pytest.mark.parametrize("criterion", ["summable", "step"])
def test_active_constraint_multiplier(variant, criterion):
    # min -z s.t. z^2 - 1 <= 0: z* = 1, lambda* = 1/2
    p = DcProblem(Z1, affine(1.0), sq(1.0, 0.0, -1.0), Z1, SIGMA)
    params = DcaParams(rho=1.0, sigma=1.0, tol=1e-7, criterion=criterion, max_iter=2000)
    z, lam, tr = run_dca(p, params, variant, z0=[0.0])
    assert z[0] == pytest.approx(1.0, abs=1e-4)
    assert lam == pytest.approx(0.5, abs=1e-4)
    assert tr.kkt_residual <= 1e-4
    assert tr.decrease_violations == 0


def test_feasible_run_keeps_beta():
    p = DcProblem(sq(1.0, -1.0), Z1, affine(0.0, -1.0), Z1, SIGMA)
    _, _, tr = run_dca(p, DcaParams(rho=1.0, tol=1e-8, beta0=2.0), z0=[3.0])
    assert all(r.beta == 2.0 and r.t == 0.0 for r in tr.records)


def test_penalty_ceiling_and_iteration_limit():
    # min z s.t. 1 - z^2 <= 0 written with a concave constraint part: g1 = 1, h1 = z^2
    p = DcProblem(affine(1.0), Z1, affine(0.0, 1.0), sq(), Box.uniform(1, -0.5, 0.5))
    with pytest.raises(DcaFailure) as info:
        run_dca(p, DcaParams(rho=1.0, tol=1e-9, beta_max=20.0, max_iter=200), z0=[0.0])
    assert type(info.value.cause).__name__ in ("PenaltyUnbounded", "MaxIterations")
    p = DcProblem(sq(), Z1, affine(1.0, -1.0), Z1, SIGMA)
    with pytest.raises(DcaFailure) as info:
        run_dca(p, DcaParams(rho=1e-2, tol=1e-12, max_iter=2), z0=[3.0])
    assert type(info.value.cause).__name__ == "MaxIterations"
    assert info.value.trace.iterations == 2


def test_params_validation():
    for bad in ({"rho": 0}, {"tol": -1}, {"criterion": "x"}, {"stopping": "x"}, {"max_iter": 0},
                {"beta0": 10.0, "beta_max": 1.0}, {"sigma": math.nan}):
        with pytest.raises(ConfigError):
            DcaParams(**bad)
    with pytest.raises(ValueError):
        run_dca(DcProblem(sq(), Z1, affine(1.0), Z1, SIGMA), DcaParams(), z0=[9.0])


def test_trace_jsonl():
    p = DcProblem(sq(), Z1, affine(1.0, -1.0), Z1, SIGMA)
    _, _, tr = run_dca(p, DcaParams(rho=1.0, tol=1e-7), z0=[3.0])
    buf = io.StringIO()
    tr.write_jsonl(buf)
    *lines, summary = [json.loads(s) for s in buf.getvalue().splitlines()]
    assert [r["k"] for r in lines] == list(range(tr.iterations))
    assert summary["type"] == "summary" and summary["reason"] == "converged"


def random_problem(seed):
    rng = np.random.default_rng(seed)
    n = 2
    M = rng.standard_normal((n, n))
    g0 = StructuredConvex(n, smooth=Quadratic(M @ M.T + 0.1 * np.eye(n), rng.standard_normal(n)))
    h0 = absval(n, float(rng.uniform(0, 1)))
    c = rng.uniform(0.2, 1.0)
    g1 = StructuredConvex(n, smooth=Quadratic(2 * np.eye(n), rng.standard_normal(n), -c))
    h1 = StructuredConvex(n, terms=MaxAffineTerms.abs_values(sp.csr_matrix(rng.standard_normal((1, n))), 0.5))
    return DcProblem(g0, h0, g1, h1, Box.uniform(n, -2, 2)), rng.uniform(-2, 2, n)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["summable", "step"]), st.sampled_from(["ipdca", "ipldca"]))
def test_run_invariants(seed, criterion, variant):
    p, z0 = random_problem(seed)
    params = DcaParams(rho=0.5, sigma=0.5, tol=1e-6, criterion=criterion, max_iter=300, debug=True)
    try:
        _, _, tr = run_dca(p, params, variant, z0)
    except DcaFailure as exc:
        assert type(exc.cause).__name__ in ("MaxIterations", "PenaltyUnbounded")
        tr = exc.trace
    betas = [r.beta for r in tr.records]
    assert all(b1 - b0 in (0.0, params.delta_beta) for b0, b1 in zip(betas, betas[1:]))
    assert all(r.residual <= r.bound for r in tr.records)
    assert all(r.decrease_margin >= 0 for r in tr.records)
    assert [r.k for r in tr.records] == list(range(len(tr.records)))
