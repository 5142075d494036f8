import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psido import diffops as D
from psido import quantize as Q
from psido import symbols as S
from psido import weights as W
from psido.symbols import expr as E

SINH = W.make_weight("sinh_hyperbolic", (), (0.05, 60.0))
ONE = W.make_weight("constant")
LAPLACE_PRINCIPAL = {(2, 0): 1.0, (0, 2): 1.0}
LAPLACE = {**LAPLACE_PRINCIPAL, (1, 0): "(* (complex 0 -1) (coth r))"}
FINE = Q.Grid(2, 256, 8, 0.5, 10.5)
# keeps q-dependent symbols away from the periodic seam in r
CHI = "(* (erfstep (* 2 (- r 4))) (erfstep (* 2 (- 13 r))))"


def hyperbolic_laplacian(domain=(0.5, 12.5)):
    return D.make_diffop(2, LAPLACE, SINH, domain, validate=False)


def evaluate(a, **env):
    return complex(np.asarray(E.evaluate(a, E.bind_params(env, {"z": env.get("z", 0j)}))))


def bump(grid, center=5.5, width=0.6):
    env = grid.q_env()
    x = (env["r"] - center) / width
    chi = np.exp(-x * x)
    d1 = -2 * x / width * chi
    d2 = (4 * x * x - 2) / width ** 2 * chi
    return env, chi, d1, d2


# construction ----------------------------------------------------------------------

def test_make_diffop_and_report():
    P = D.make_diffop(2, LAPLACE_PRINCIPAL, SINH, (1.0, 10.0))
    assert P.m == 2 and P.report["bounded_geometry"]
    sigma = D.principal_symbol(P)
    assert S.to_text(sigma) == "(+ (* (^ eta1 2) (^ lambda -2)) (^ rho 2))"
    assert sigma.free == {"r", "rho", "eta1"}
    assert P.coefficient((1, 1)) is E.ZERO


def test_make_diffop_errors():
    with pytest.raises(D.DiffOpError):
        D.make_diffop(1, {(2, 0): 1.0}, SINH)
    with pytest.raises(D.DiffOpError):
        D.make_diffop(1, {(1, 0): "rho"}, SINH)
    with pytest.raises(D.DiffOpError):
        D.make_diffop(1, {(1, 0): 1.0}, SINH, weighted=True)
    with pytest.raises(E.SymbolPoleError):
        D.make_diffop(0, {(0, 0): "(/ 1 (- r 2))"}, SINH, (1.0, 3.0))


def test_principal_symbol_values():
    sigma = D.principal_symbol(hyperbolic_laplacian())
    rng = np.random.default_rng(0)
    for r, rho, eta in rng.uniform([0.5, -3, -3], [10, 3, 3], (10, 3)):
        assert evaluate(sigma, r=r, theta1=0.3, rho=rho, eta1=eta) == pytest.approx(
            rho ** 2 + eta ** 2 / np.sinh(r) ** 2, rel=1e-13)
    m = D.multiplication_op("(+ 2 (cos theta1))", SINH)
    assert evaluate(D.principal_symbol(m), r=1.0, theta1=0.5) == pytest.approx(2 + np.cos(0.5))


# application -----------------------------------------------------------------------

def test_second_derivative_matches_spectral():
    env, chi, d1, d2 = bump(FINE)
    u = Q.GridFunction(np.broadcast_to(chi * (1 + 0.2 * np.cos(env["theta1"])),
                                       FINE.shape).astype(complex), FINE)
    P = D.make_diffop(2, {(2, 0): 1.0}, ONE, (0.5, 10.5), validate=False)
    v = D.apply_diffop(P, u)
    kr = 2 * np.pi * np.fft.fftfreq(FINE.n_r, FINE.h_r)[:, None]
    oracle = np.fft.ifft(kr ** 2 * np.fft.fft(u.values, axis=0), axis=0)
    assert np.max(np.abs(v.values - oracle)) <= 1e-9 * np.max(np.abs(oracle))
    exact = -np.broadcast_to(d2 * (1 + 0.2 * np.cos(env["theta1"])), FINE.shape)
    assert np.max(np.abs(v.values - exact)) <= 1e-8 * np.max(np.abs(exact))


def test_multiplication_is_exact():
    u = Q.random_bandlimited(FINE, 0)
    v = D.apply_diffop(D.multiplication_op(2.5, SINH, (0.5, 10.5)), u)
    np.testing.assert_array_equal(v.values, 2.5 * u.values)


def test_hyperbolic_laplacian_closed_form():
    env, chi, d1, d2 = bump(FINE)
    r, th = env["r"], env["theta1"]
    u = Q.GridFunction(np.broadcast_to(chi * np.exp(1j * th), FINE.shape), FINE)
    v = D.apply_diffop(hyperbolic_laplacian((0.5, 10.5)), u)
    exact = np.broadcast_to((-d2 - d1 / np.tanh(r) + chi / np.sinh(r) ** 2)
                            * np.exp(1j * th), FINE.shape)
    assert np.max(np.abs(v.values - exact)) <= 1e-8 * np.max(np.abs(exact))


def test_weighted_application_conjugates():
    g = S.parse_symbol("(^ (sinh r) 2)")
    P = D.make_diffop(1, {(1, 0): 1.0}, SINH, (0.5, 10.5), weighted=True, g=g,
                      validate=False)
    env, chi, d1, _ = bump(FINE)
    u = Q.GridFunction(np.broadcast_to(chi, FINE.shape).astype(complex), FINE)
    v = D.apply_diffop(P, u)
    exact = np.broadcast_to((d1 + 0.5 / np.tanh(env["r"]) * chi) / 1j, FINE.shape)
    assert np.max(np.abs(v.values - exact)) <= 1e-8 * np.max(np.abs(exact))


# ellipticity ---------------------------------------------------------------------

def test_ellipticity_at_minus_one_is_exact():
    P = D.make_diffop(2, LAPLACE_PRINCIPAL, SINH, (1.0, 10.0), validate=False)
    cert = D.ellipticity_certificate(P, -1.0)
    assert cert.C == pytest.approx(1.0, abs=1e-12)
    assert cert.delta == pytest.approx(1.0, abs=1e-12)
    assert cert.passed


def test_ellipticity_at_i():
    P = D.make_diffop(2, LAPLACE_PRINCIPAL, SINH, (1.0, 10.0), validate=False)
    cert = D.ellipticity_certificate(P, 1j)
    # brute force over s >= 0: sup (1+s)/|i-s| = sqrt(2) at s = 1, inf |i-s| = 1 at s = 0
    s = np.linspace(0, 1e3, 2_000_001)
    brute = np.max((1 + s) / np.abs(1j - s))
    assert cert.delta == pytest.approx(1.0, abs=1e-12)
    assert 1.0 <= cert.C <= brute + 1e-12
    assert cert.C == pytest.approx(np.sqrt(2), rel=1e-2)
    assert cert.passed


def test_first_order_symbol_is_not_elliptic_at_minus_one():
    P = D.make_diffop(1, {(1, 0): 1.0}, ONE, (1.0, 10.0), validate=False)
    cert = D.ellipticity_certificate(P, -1.0)
    assert not cert.passed
    assert cert.refined_C > cert.C


# composition maps ----------------------------------------------------------------

def test_constant_coefficient_Lk():
    P = D.make_diffop(2, {(2, 0): 1.0}, ONE, (1.0, 10.0), validate=False)
    b = S.parse_symbol("(/ 1 (- z (^ rho 2)))")
    assert D.compose_Lk(P, 1, b) is E.ZERO
    assert D.compose_Lk(P, 2, b) is E.ZERO
    assert evaluate(D.compose_Lk(P, 0, E.ONE), rho=1.7) == pytest.approx(1.7 ** 2)
    assert D.L0_tilde(P, b) is E.ZERO
    with pytest.raises(D.DiffOpError):
        D.compose_Lk(P, 3, b)


def test_L1_hyperbolic_against_hand_expansion():
    P = hyperbolic_laplacian()
    b0 = E.div(E.ONE, E.sub(E.Z, D.principal_symbol(P)))
    L1 = D.compose_Lk(P, 1, b0)
    assert L1 is not E.ZERO
    r, rho, eta, z = 2.0, 1.0, 1.0, 1j
    s = rho ** 2 + eta ** 2 / np.sinh(r) ** 2
    b = 1 / (z - s)
    db = b * b * (-2 * np.cosh(r) / np.sinh(r) ** 3 * eta ** 2)
    hand = (2 * rho - 1j / np.tanh(r)) * (-1j) * db
    assert evaluate(L1, r=r, theta1=0.0, rho=rho, eta1=eta, z=z) == pytest.approx(hand, rel=1e-13)


def test_L0_tilde_collects_lower_order_terms():
    P = hyperbolic_laplacian()
    b = S.parse_symbol("(/ 1 (+ 2 (^ rho 2)))")
    lt = D.L0_tilde(P, b)
    val = evaluate(lt, r=1.5, theta1=0.0, rho=0.7, eta1=0.2)
    assert val == pytest.approx(-1j / np.tanh(1.5) * 0.7 / (2 + 0.49), rel=1e-13)


@pytest.mark.parametrize("text", ["(/ (+ 2 (cos theta1)) (+ 3 (^ rho 2) (* (^ lambda -2) (^ eta1 2))))",
                                  "(* (exp (* -0.2 r)) (/ rho (+ 1 (^ rho 2))))"])
def test_sum_of_Lk_reproduces_composition(text):
    grid = Q.Grid(2, 256, 8, 0.5, 16.5)
    P = hyperbolic_laplacian((0.5, 16.5))
    b = S.parse_symbol(f"(* {CHI} {text})", SINH)
    u = Q.random_bandlimited(grid, 3)
    lhs = D.apply_diffop(P, Q.apply_op(b, u), check_admissible=False)
    rhs = Q.apply_op(D.compose_symbol(P, b), u)
    assert (lhs - rhs).norm() <= 1e-7 * rhs.norm()


def test_Lk_linear_in_b():
    P = hyperbolic_laplacian()
    a = S.parse_symbol("(/ 1 (+ 3 (^ rho 2)))")
    b = S.parse_symbol("(* (exp (* -0.2 r)) rho)")
    both = D.compose_Lk(P, 1, E.add(E.mul(2.0, a), b))
    sep = E.add(E.mul(2.0, D.compose_Lk(P, 1, a)), D.compose_Lk(P, 1, b))
    for r, rho, eta in [(1.0, 0.5, 2.0), (3.0, -1.0, 0.1)]:
        assert evaluate(both, r=r, theta1=0.0, rho=rho, eta1=eta) == pytest.approx(
            evaluate(sep, r=r, theta1=0.0, rho=rho, eta1=eta), rel=1e-12)


# weight conjugation --------------------------------------------------------------

def test_conjugate_weight_zero_power():
    P = hyperbolic_laplacian()
    Q0 = D.conjugate_weight(P, "(^ (sinh r) 2)", 0.0)
    assert Q0.table_text() == P.table_text()


def test_conjugate_exponential_density():
    P = D.make_diffop(1, {(1, 0): 1.0}, ONE, (1.0, 10.0), validate=False)
    Qp = D.conjugate_weight(P, "(exp (* 2 r))", 0.25)
    assert evaluate(Qp.coefficient((1, 0)), r=1.0) == pytest.approx(1.0)
    # g^{1/4} D_r g^{-1/4} = D_r - (1/4)(1/i) d_r log g = D_r - 1/(2i)
    assert evaluate(Qp.coefficient((0, 0)), r=3.0) == pytest.approx(-1 / 2j, rel=1e-14)
    env, chi, d1, _ = bump(FINE)
    u = Q.GridFunction(np.broadcast_to(chi, FINE.shape).astype(complex), FINE)
    v = D.apply_diffop(Qp, u)
    exact = np.broadcast_to(d1 / 1j - chi / 2j, FINE.shape)
    assert np.max(np.abs(v.values - exact)) <= 1e-8 * np.max(np.abs(exact))


def test_principal_symbol_invariant_under_conjugation():
    P = hyperbolic_laplacian()
    Qp = D.conjugate_weight(P, "(^ (sinh r) 2)", 0.25)
    s1, s2 = D.principal_symbol(P), D.principal_symbol(Qp)
    rng = np.random.default_rng(1)
    for r, th, rho, eta in rng.uniform([0.5, 0, -5, -5], [12, 6, 5, 5], (50, 4)):
        a = evaluate(s1, r=r, theta1=th, rho=rho, eta1=eta)
        assert evaluate(s2, r=r, theta1=th, rho=rho, eta1=eta) == pytest.approx(a, rel=1e-12)


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_conjugation_is_a_group_action(a, b):
    P = hyperbolic_laplacian()
    g = "(+ 2 (* (sin theta1) (exp (* -0.3 r))))"
    twice = D.conjugate_weight(D.conjugate_weight(P, g, a), g, b)
    once = D.conjugate_weight(P, g, a + b)
    keys = set(twice.coeffs) | set(once.coeffs)
    for r, th in [(1.0, 0.3), (2.5, 4.0), (7.0, 2.0)]:
        for k in keys:
            x = evaluate(twice.coefficient(k), r=r, theta1=th)
            y = evaluate(once.coefficient(k), r=r, theta1=th)
            assert abs(x - y) <= 1e-12 * max(1.0, abs(y))


def test_weighted_table_round_trip_in_config():
    P = D.diffop_from_config({"order": 2, "coeff": {"2,0": "1", "0,2": "1",
                                                    "1,0": "(* (complex 0 -1) (coth r))"}},
                             SINH, (0.5, 12.5))
    assert P.table_text() == hyperbolic_laplacian().table_text()
