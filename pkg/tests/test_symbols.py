import cmath
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psido import symbols as S
from psido import weights as W
from psido.symbols import expr as E

SINH = W.make_weight("sinh_hyperbolic", (), (0.05, 60.0))
POINT = {"r": 1.7, "theta1": 0.4, "rho": 0.9, "eta1": -1.3, "r'": 2.2, "theta1'": 1.1}


# random trees -------------------------------------------------------------------

leaves = st.sampled_from([E.R, E.RHO, E.eta(1), E.theta(1), E.lam(SINH), E.dloglam(SINH, 1),
                          E.as_expr(0.7), E.as_expr(-1.5), E.as_expr(0.3 + 0.2j)])


def _positive(x):
    return E.add(1.5, E.mul(x, E.conjugate(x)))


def _grow(children):
    unary = st.sampled_from(["exp", "sin", "cos", "tanh", "inv", "sq", "erfstep",
                             "smoothstep", "neg"])
    binary = st.sampled_from(["add", "mul", "sub"])

    def un(op, x):
        if op == "exp":
            return E.exp(E.mul(0.3, E.sin(x)))
        if op == "inv":
            return E.ipow(_positive(x), -1)
        if op == "sq":
            return E.ipow(x, 2)
        if op in ("erfstep", "smoothstep"):
            return E.prim(op, E.mul(0.5, E.cos(x)))
        if op == "neg":
            return E.neg(x)
        return E.func(op, x)

    def bi(op, x, y):
        return {"add": E.add, "mul": E.mul, "sub": E.sub}[op](x, y)

    return st.one_of(st.builds(un, unary, children),
                     st.builds(bi, binary, children, children))


trees = st.recursive(leaves, _grow, max_leaves=6)


def _eval(e, env=POINT):
    return complex(np.asarray(E.evaluate(e, env)))


@given(trees, st.sampled_from(["r", "rho", "eta1", "theta1"]))
def test_differentiate_matches_finite_differences(e, var):
    d = _eval(E.differentiate(e, var))
    h = 1e-5
    up, dn = dict(POINT), dict(POINT)
    up[var] += h
    dn[var] -= h
    fd = (_eval(e, up) - _eval(e, dn)) / (2 * h)
    scale = max(1.0, abs(d), abs(_eval(e)))
    assert abs(fd - d) <= 1e-6 * scale


@given(trees)
def test_text_round_trip(e):
    back = S.parse_symbol(S.to_text(e), SINH)
    assert cmath.isclose(_eval(back), _eval(e), rel_tol=1e-12, abs_tol=1e-12)


@given(trees)
def test_conjugate_tree(e):
    assert cmath.isclose(_eval(E.conjugate(e)), _eval(e).conjugate(), rel_tol=1e-12,
                         abs_tol=1e-12)


@given(trees, trees)
def test_add_mul_evaluate_pointwise(a, b):
    s, p = _eval(E.add(a, b)), _eval(E.mul(a, b))
    assert cmath.isclose(s, _eval(a) + _eval(b), rel_tol=1e-12, abs_tol=1e-12)
    assert cmath.isclose(p, _eval(a) * _eval(b), rel_tol=1e-12, abs_tol=1e-12)


# differentiate examples -----------------------------------------------------------

def test_differentiate_examples():
    a = S.parse_symbol("(+ (^ rho 2) (* (^ eta1 2) (^ lambda -2)))", SINH)
    assert _eval(E.differentiate(a, "rho")) == pytest.approx(2 * POINT["rho"])
    b = E.ipow(E.lam(SINH), -2)
    got = _eval(E.differentiate(b, "r"))
    r = POINT["r"]
    assert got == pytest.approx(-2 * math.sinh(r) ** -2 / math.tanh(r), rel=1e-13)
    c = S.parse_symbol("(/ 1 (- z (^ rho 2)))")
    assert E.differentiate(c, "r") is E.ZERO


def test_primitive_derivatives():
    for name in ("smoothstep", "erfstep", "flat"):
        x = np.linspace(-0.9, 1.9, 31)
        for k in range(3):
            f = lambda t: E.evaluate(E.prim(name, E.R, k), {"r": t})
            d = E.evaluate(E.prim(name, E.R, k + 1), {"r": x})
            fd = (f(x + 1e-6) - f(x - 1e-6)) / 2e-6
            assert np.allclose(fd, d, atol=1e-5 * max(1.0, np.abs(d).max()))


def test_smoothstep_limits():
    x = np.array([-1.0, 0.0, 1.0, 2.0])
    v = E.evaluate(E.prim("smoothstep", E.R), {"r": x})
    np.testing.assert_array_equal(v, [0.0, 0.0, 1.0, 1.0])


# weighted derivative ---------------------------------------------------------------

def test_weighted_derivative_trivial():
    for A, B in [((1, 0), (0, 0)), ((0, 1), (0, 0)), ((0, 0), (1, 1))]:
        assert E.is_const(S.weighted_derivative(E.ONE, A, B, SINH), 0.0)
    a = E.mul(E.ipow(E.lam(SINH), -1), E.eta(1))
    one = S.weighted_derivative(a, (0, 0), (0, 1), SINH)
    assert _eval(one) == pytest.approx(1.0, rel=1e-14)


def test_weighted_derivative_r():
    a = E.mul(E.ipow(E.lam(SINH), -1), E.eta(1))
    d = S.weighted_derivative(a, (1, 0), (0, 0), SINH)
    env = {"r": 2.0, "eta1": 3.0}
    f = lambda r: 3.0 / math.sinh(r)
    fd = (f(2 + 1e-5) - f(2 - 1e-5)) / 2e-5
    assert complex(E.evaluate(d, env)).real == pytest.approx(fd, rel=1e-8)
    assert complex(E.evaluate(d, env)).real == pytest.approx(
        -(1 / math.tanh(2)) * 3 / math.sinh(2), rel=1e-13)


# seminorms --------------------------------------------------------------------------

LAT = S.SymbolLattice(n=2, r_window=(1.0, 10.0))


def test_seminorm_constant_one():
    tag = S.SymbolClassTag(0.0, 0.0, SINH)
    for M in range(4):
        assert S.estimate_seminorm(E.ONE, tag, M, LAT).value == pytest.approx(1.0)


def test_seminorm_bracket_squared():
    a = S.parse_symbol("(+ 1 (^ rho 2) (* (^ lambda -2) (^ eta1 2)))", SINH)
    est = S.estimate_seminorm(a, S.SymbolClassTag(2.0, 1.0, SINH), 0, LAT)
    assert est.value == pytest.approx(1.0, rel=1e-12)


def test_seminorm_baseline_regression():
    from psido.experiments import load_constants
    rec = load_constants()["seminorm_baseline"]
    a = S.parse_symbol("(/ 1 (- -1 (+ (^ rho 2) (* (^ lambda -2) (^ eta1 2)))))", SINH)
    est = S.estimate_seminorm(a, S.SymbolClassTag(-2.0, 1.0, SINH), 2, LAT)
    assert est.value == pytest.approx(rec["value"], rel=rec["rel_tol"])


def test_seminorm_monotone_in_M():
    a = S.parse_symbol("(/ (+ 2 (cos theta1)) (+ 2 (^ rho 2) (* (^ lambda -2) (^ eta1 2))))",
                       SINH)
    tag = S.SymbolClassTag(-2.0, 1.0, SINH)
    vals = [S.estimate_seminorm(a, tag, M, LAT).value for M in range(4)]
    assert all(x <= y for x, y in zip(vals, vals[1:]))


def test_refinement_check_stable():
    a = S.parse_symbol("(/ 1 (+ 1 (^ rho 2) (* (^ lambda -2) (^ eta1 2))))", SINH)
    chk = S.refinement_check(S.estimate_seminorm, a, S.SymbolClassTag(-2.0, 1.0, SINH), 1, LAT)
    assert chk.stable and chk.relative_change <= 0.10


def test_bisymbol_seminorm_trivial():
    bl = S.BisymbolLattice()
    for t in (0.0, 0.5, 1.0):
        tag = S.SymbolClassTag(0.0, 0.0, SINH, t)
        assert S.estimate_bisymbol_seminorm(E.ONE, tag, 1, bl).value == pytest.approx(1.0)
    a0 = E.div(E.RHO, E.func("exp", E.mul(0.5, E.func("log", E.add(1.0, E.ipow(E.RHO, 2))))))
    est = S.estimate_bisymbol_seminorm(S.freeze_bisymbol(a0, 0.5),
                                       S.SymbolClassTag(0.0, 0.0, SINH, 0.5), 0, bl)
    assert est.value <= 1.0 and est.value == pytest.approx(1.0, abs=1e-4)


def test_bisymbol_transfer_constant():
    from psido.experiments import load_constants
    C = load_constants()["transfer_constant"]["value"]
    a0 = S.parse_symbol("(/ 1 (+ 1 (^ rho 2) (* (^ lambda -2) (^ eta1 2))))", SINH)
    lat = S.SymbolLattice(n=2, r_window=(1.0, 7.0))
    s = S.estimate_seminorm(a0, S.SymbolClassTag(-2.0, 1.0, SINH), 1, lat).value
    bs = S.estimate_bisymbol_seminorm(S.freeze_bisymbol(a0, 0.5),
                                      S.SymbolClassTag(-2.0, 1.0, SINH, 0.5), 1,
                                      S.BisymbolLattice()).value
    assert np.isfinite(bs) and bs <= C * s


# bisymbol helpers -------------------------------------------------------------------

def test_freeze_bisymbol():
    a0 = E.mul(E.R, E.RHO)
    assert S.freeze_bisymbol(a0, 1.0) is a0
    a = S.freeze_bisymbol(a0, 0.5)
    assert _eval(a, {"r": 1.0, "r'": 3.0, "rho": 2.0, "theta1": 0, "theta1'": 0}) == 4.0
    b = S.freeze_bisymbol(a0, 0.0)
    assert b.free == {"r'", "rho"}
    with pytest.raises(ValueError):
        S.freeze_bisymbol(a0, 1.5)


def test_adjoint_bisymbol():
    sym = S.parse_symbol("(* (exp (- 0 (^ (- r r') 2))) (+ 1 (^ rho 2)))")
    assert _eval(S.adjoint_bisymbol(sym)) == pytest.approx(_eval(sym))
    a = E.mul(1j, E.R)
    adj = S.adjoint_bisymbol(a)
    assert adj.free == {"r'"}
    assert _eval(adj) == pytest.approx(-1j * POINT["r'"])
    res = S.parse_symbol("(/ 1 (- z (^ rho 2)))")
    env = E.bind_params({"rho": 1.0}, {"z": 1j})
    v = complex(E.evaluate(res, env))
    va = complex(E.evaluate(S.adjoint_bisymbol(res), env))
    assert v == pytest.approx(1 / (1j - 1)) and va == pytest.approx(1 / (-1j - 1))


@given(trees)
def test_adjoint_is_involution(e):
    twice = S.adjoint_bisymbol(S.adjoint_bisymbol(S.freeze_bisymbol(e, 0.5)))
    once = S.freeze_bisymbol(e, 0.5)
    assert cmath.isclose(_eval(twice), _eval(once), rel_tol=1e-12, abs_tol=1e-12)


def test_semiclassical_symbol():
    a = S.parse_symbol("(+ (^ rho 2) eta1)")
    ah = S.semiclassical_symbol(a, 0.5)
    assert _eval(ah) == pytest.approx(0.25 * POINT["rho"] ** 2 + 0.5 * POINT["eta1"])


# parser errors ----------------------------------------------------------------------

@pytest.mark.parametrize("text", ["", "(+ 1 2", "(^ r 0.5)", "(foo r)", "(/ 1)", "1 2",
                                  "(complex r 1)", ")"])
def test_parse_errors(text):
    with pytest.raises(S.SymbolParseError):
        S.parse_symbol(text)


def test_lambda_needs_weight():
    with pytest.raises(S.SymbolParseError):
        S.parse_symbol("(* lambda rho)")


def test_unbound_names():
    with pytest.raises(E.SymbolError):
        E.evaluate(E.RHO, {"r": 1.0})
