import numpy as np
import pytest

from psido import diffops as D
from psido import parametrix as PX
from psido import quantize as Q
from psido import symbols as S
from psido import weights as W
from psido.symbols import expr as E

SINH = W.make_weight("sinh_hyperbolic", (), (0.05, 60.0))
ONE = W.make_weight("constant")
CHI = "(* (erfstep (* 2 (- r 4))) (erfstep (* 2 (- 13 r))))"


def radial_second(domain=(0.0, 16.0)):
    return D.make_diffop(2, {(2, 0): 1.0}, ONE, domain, validate=False)


def hyperbolic_laplacian(domain=(1.0, 10.0)):
    return D.make_diffop(2, {(2, 0): 1.0, (0, 2): 1.0, (1, 0): "(* (complex 0 -1) (coth r))"},
                         SINH, domain, validate=False)


def ev(a, z, **env):
    return complex(np.asarray(E.evaluate(a, E.bind_params(env, {"z": z}))))


def chi_jet(r):
    # erf-plateau cutoff and its first two derivatives, by hand
    from scipy.special import erf
    x1, x2 = 2 * (r - 4), 2 * (13 - r)
    s1, s2 = 0.5 * (1 + erf(x1)), 0.5 * (1 + erf(x2))
    g1, g2 = np.exp(-x1 * x1) / np.sqrt(np.pi), np.exp(-x2 * x2) / np.sqrt(np.pi)
    d1, d2 = 2 * g1, -2 * g2
    dd1, dd2 = -8 * x1 * g1, -8 * x2 * g2
    return s1 * s2, d1 * s2 + s1 * d2, dd1 * s2 + 2 * d1 * d2 + s1 * dd2


def test_constant_coefficients_give_vanishing_corrections():
    # D_r^2 alone is not elliptic in two variables, so skip the certificate
    res = PX.build_parametrix(radial_second(), -1.0, E.ONE, 3, certify=False)
    assert res.terms[0] is not E.ZERO
    assert all(t is E.ZERO for t in res.terms[1:])
    assert res.remainder is E.ZERO
    assert ev(res.terms[0], -1.0, r=2.0, rho=1.5) == pytest.approx(1 / (-1 - 2.25))


def test_first_correction_with_cutoff():
    res = PX.build_parametrix(radial_second(), 1j, S.parse_symbol(CHI), 1, certify=False)
    rng = np.random.default_rng(0)
    for r, rho in rng.uniform([3.0, -4.0], [6.0, 4.0], (10, 2)):
        _, c1, _ = chi_jet(r)
        expected = -2j * rho * c1 / (1j - rho ** 2) ** 2
        assert ev(res.terms[1], 1j, r=r, rho=rho) == pytest.approx(expected, rel=1e-10, abs=1e-15)


def test_first_remainder_with_cutoff():
    z = 1j
    res = PX.build_parametrix(radial_second(), z, S.parse_symbol(CHI), 0, certify=False)
    for r, rho in [(4.0, 1.0), (4.3, -0.5), (12.8, 2.0)]:
        _, c1, c2 = chi_jet(r)
        expected = (2j * rho * c1 + c2) / (z - rho ** 2)
        assert ev(res.remainder, z, r=r, rho=rho) == pytest.approx(expected, rel=1e-10)


def test_hyperbolic_first_term_against_hand_expansion():
    P = hyperbolic_laplacian()
    z = 1j
    res = PX.build_parametrix(P, z, E.ONE, 2)
    assert "r" in res.terms[1].free
    for r, rho, eta in [(1.5, 0.3, 0.7), (2.0, 1.0, 1.0), (3.0, -1.2, 4.0),
                        (5.0, 0.0, 10.0), (8.0, 2.5, -30.0)]:
        s = rho ** 2 + eta ** 2 / np.sinh(r) ** 2
        b0 = 1 / (z - s)
        db0 = b0 * b0 * (-2 * np.cosh(r) / np.sinh(r) ** 3 * eta ** 2)
        coth = 1 / np.tanh(r)
        b1 = b0 * (-1j * coth * rho * b0 + (2 * rho - 1j * coth) * (-1j) * db0)
        got = ev(res.terms[1], z, r=r, theta1=0.0, rho=rho, eta1=eta)
        assert got == pytest.approx(b1, rel=1e-12)
        assert np.isfinite(ev(res.terms[2], z, r=r, theta1=0.0, rho=rho, eta1=eta))


def test_class_report_of_remainder():
    P = hyperbolic_laplacian()
    res = PX.build_parametrix(P, 1j, E.ONE, 1, class_M=1)
    rep = res.class_report
    assert set(rep) == {"b0", "b1", "e2"}
    assert rep["e2"]["m"] == -2 and rep["b1"]["m"] == -3
    for row in rep.values():
        assert np.isfinite(row["coarse"]) and np.isfinite(row["fine"])
        assert row["stable"]


def test_support_of_terms():
    P = hyperbolic_laplacian()
    chi = S.parse_symbol("(smoothstep (- r 3))")
    res = PX.build_parametrix(P, 1j, chi, 2)
    lat = S.SymbolLattice(n=2, r_window=(1.0, 10.0), n_r=19, n_theta=2, log10_min=-1,
                          log10_max=2, log_step=0.5, n_dirs=8)
    assert PX.support_violation(res, lat) <= 1e-14


def test_certificate_failure_and_order_guard():
    P = D.make_diffop(1, {(1, 0): 1.0}, ONE, (1.0, 10.0), validate=False)
    with pytest.raises(PX.ParametrixError):
        PX.build_parametrix(P, -1.0, E.ONE, 0)
    with pytest.raises(PX.ParametrixError):
        PX.build_parametrix(radial_second(), -1.0, E.ONE, PX.N_MAX + 1)


# remainder bound shape ----------------------------------------------------------

def laplace_principal():
    return D.make_diffop(2, {(2, 0): 1.0, (0, 2): 1.0}, SINH, (1.0, 10.0), validate=False)


def test_remainder_bound_unit_case():
    assert PX.remainder_bound(laplace_principal(), -1.0, 1, 0) == pytest.approx(3.0, abs=1e-12)


def test_remainder_bound_decay_in_imaginary_direction():
    ys = np.array([10.0, 100.0, 1000.0])
    vals = [PX.remainder_bound(laplace_principal(), 1j * y, 0, 0) for y in ys]
    slope = np.polyfit(np.log(ys), np.log(vals), 1)[0]
    assert slope == pytest.approx(-0.5, abs=0.05)


def test_remainder_bound_diverges_near_symbol_range():
    eps = [1.0, 1e-1, 1e-2, 1e-3]
    vals = [PX.remainder_bound(laplace_principal(), -e, 1, 0) for e in eps]
    assert all(b > a for a, b in zip(vals, vals[1:]))
    assert vals[-1] > 1e3 * vals[0]


# residuals on grids -------------------------------------------------------------

def test_verify_parametrix_algebraic_identity():
    grid = Q.Grid(2, 256, 8, 0.5, 16.5)
    P = hyperbolic_laplacian((0.5, 16.5))
    res = PX.build_parametrix(P, 1j, S.parse_symbol(CHI), 1)
    u = Q.random_bandlimited(grid, 0)
    rep = PX.verify_parametrix(P, res, u)
    assert rep.algebraic <= 1e-8
    assert rep.practical > rep.algebraic


def test_residual_csv(tmp_path):
    path = tmp_path / "res.csv"
    PX.write_residual_csv(path, [{"case": "a", "z": "i", "N": 1, "algebraic": 1e-12}])
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(PX.RESIDUAL_COLUMNS)
    assert lines[1].startswith("a,i,1,")
