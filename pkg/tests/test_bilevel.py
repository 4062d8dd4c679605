import numpy as np
import pytest
import scipy.sparse as sp

from bidca.bilevel import (BilevelProblem, ValueFunction, assemble_vp, run_bilevel, solve_lower,
                           value_subgradient)
from bidca.convex import Box, Quadratic, StructuredConvex
from bidca.dca import DcaParams
from bidca.errors import AttestationMissing
from bidca.models.toys import TOY_IDS, build_toy


def clamp_lower_only(formula="smooth"):
    """f = (y - x)^2 on Y = [0, 1], x in [-2, 2]; upper objective zero."""
    f = StructuredConvex(2, smooth=Quadratic(np.array([[2.0, -2.0], [-2.0, 2.0]])))
    Z = StructuredConvex.zero(2)
    return BilevelProblem(1, 1, Z, Z, f, Box.uniform(1, -2, 2), Box.uniform(1, 0, 1),
                          partial_formula=formula)


@pytest.mark.parametrize("x, y, v", [(2.0, 1.0, 1.0), (0.3, 0.3, 0.0), (-1.0, 0.0, 1.0)])
def test_solve_lower_clamp(x, y, v):
    sol = solve_lower(clamp_lower_only(), [x])
    assert sol.y[0] == pytest.approx(y, abs=1e-6)
    assert sol.value == pytest.approx(v, abs=1e-6)
    assert sol.gamma.size == 0


def test_value_subgradient_matches_analytic_derivative():
    p = clamp_lower_only()
    sol = solve_lower(p, [2.0])
    assert value_subgradient(sol, p)[0] == pytest.approx(2.0, abs=1e-5)


def test_value_subgradient_needs_attestation():
    p = clamp_lower_only(formula=None)
    with pytest.raises(AttestationMissing):
        value_subgradient(solve_lower(p, [0.5]), p)


def test_value_subgradient_zero_when_f_independent_of_x():
    f = StructuredConvex(2, smooth=Quadratic(np.diag([0.0, 2.0]), [0.0, -1.0]))
    Z = StructuredConvex.zero(2)
    p = BilevelProblem(1, 1, Z, Z, f, Box.uniform(1, -1, 1), Box.uniform(1, -5, 5),
                       partial_formula="smooth")
    assert np.allclose(value_subgradient(solve_lower(p, [0.4]), p), 0.0)


def test_value_function_cache_and_lift():
    v = ValueFunction(clamp_lower_only())
    assert v.value(np.array([2.0, 0.3])) == pytest.approx(1.0, abs=1e-6)
    assert v.value_x([2.0]) == pytest.approx(1.0, abs=1e-6)
    assert v.solves == 1
    g = v.subgrad(np.array([2.0, 0.7]))
    assert g[1] == 0.0 and g[0] == pytest.approx(2.0, abs=1e-5)


def test_constraint_oracle():
    p = build_toy("clamp")
    for eps in (0.0, 1e-2):
        dc = assemble_vp(p, eps)
        for x in (-1.5, 0.4, 1.7):
            sol = solve_lower(p, [x])
            z = np.concatenate([sol.x, sol.y])
            assert dc.g1.value(z) - dc.h1.value(z) == pytest.approx(-eps, abs=1e-7)
    with pytest.raises(ValueError):
        assemble_vp(p, -1.0)


def test_lower_constraints_carry_multipliers():
    # lower level min (y - x)^2 s.t. y <= 0.5 x, so v(x) = x^2/4 for x > 0
    f = StructuredConvex(2, smooth=Quadratic(np.array([[2.0, -2.0], [-2.0, 2.0]])))
    Z = StructuredConvex.zero(2)
    p = BilevelProblem(1, 1, Z, Z, f, Box.uniform(1, 0.1, 2), Box.free(1),
                       Gx=sp.csr_matrix([[-0.5]]), Gy=sp.csr_matrix([[1.0]]), h=np.zeros(1),
                       partial_formula="smooth")
    sol = solve_lower(p, [1.0])
    assert sol.y[0] == pytest.approx(0.5, abs=1e-6)
    assert sol.gamma[0] == pytest.approx(1.0, abs=1e-5)
    assert value_subgradient(sol, p)[0] == pytest.approx(0.5, abs=1e-5)


def test_toy_metadata_is_consistent():
    for name in ("clamp", "quadratic"):
        p = build_toy(name)
        for x in np.linspace(-2, 2, 9):
            sol = solve_lower(p, [x])
            # at x = +-2 the quadratic toy's unconstrained minimizer lands exactly on
            # the bound with a zero multiplier, where interior points converge slowly
            assert sol.y[0] == pytest.approx(p.meta["S"](x), abs=1e-4)
            assert sol.value == pytest.approx(p.meta["v"](x), abs=1e-6)
    assert set(TOY_IDS) == {"clamp", "quadratic", "lasso"}
    with pytest.raises(KeyError):
        build_toy("nope")


def test_clamp_toy_reaches_optimum():
    p = build_toy("clamp")
    res = run_bilevel(p, 1e-4, DcaParams(tol=1e-6))
    assert res.status == "converged"
    assert np.hypot(res.x[0] - 1, res.y[0] - 1) <= 1e-3
    assert p.F1.value(np.concatenate([res.x, res.y])) <= 1e-3


def test_clamp_toy_without_relaxation():
    res = run_bilevel(build_toy("clamp"), 0.0, DcaParams(tol=1e-6, max_iter=300))
    if res.status == "converged":
        assert res.trace.kkt_residual <= 1e-4


def test_feasible_start_keeps_beta_on_first_update():
    p = build_toy("clamp")
    res = run_bilevel(p, 1e-2, DcaParams(tol=1e-6), start=(np.array([0.5]), np.array([0.5])))
    first = res.trace.records[0]
    assert first.t == 0.0 and not first.penalty_increased


def test_variant_requires_smooth_lower_objective():
    p = build_toy("lasso")
    with pytest.raises(ValueError):
        run_bilevel(p, 1e-2, DcaParams(), "ipldca")


def test_start_outside_box_rejected():
    with pytest.raises(ValueError):
        run_bilevel(build_toy("clamp"), 1e-2, DcaParams(), start=(np.array([5.0]), np.array([0.0])))
