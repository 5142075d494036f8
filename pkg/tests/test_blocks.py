import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psido import blocks as B
from psido import quantize as Q
from psido import symbols as S
from psido import weights as W
from psido.symbols import expr as E

SINH = W.make_weight("sinh_hyperbolic", (), (0.05, 60.0))
ONE = W.make_weight("constant")
GRID = Q.Grid(2, 128, 8, 0.0, 8.0)
RESOLVENT = "(/ 1 (+ 1 (^ rho 2) (^ eta1 2)))"


def test_partition_sums_to_one():
    part = B.DEFAULT_PARTITION
    r = np.linspace(2.0, 8.0, 601)
    total = np.asarray(E.evaluate(part.window(range(11)), {"r": r}))
    np.testing.assert_allclose(total, 1.0, atol=1e-14)
    with pytest.raises(ValueError):
        B.Partition1D(0.5)


def test_psi_tilde_covers_psi():
    part = B.DEFAULT_PARTITION
    lo, hi = part.support
    x = np.linspace(lo, hi, 201)
    np.testing.assert_allclose(E.evaluate(part.psi_tilde(0), {"r": x}), 1.0, atol=1e-14)
    out = np.array([-1 + 0.5 * part.delta, 1 - 0.5 * part.delta])
    np.testing.assert_allclose(E.evaluate(part.psi_tilde(0), {"r": out}), 0.0, atol=1e-14)


def test_scale_conjugate_trivial_cases():
    part = B.DEFAULT_PARTITION
    a = S.freeze_bisymbol(S.parse_symbol("(* (cos theta1) (/ eta1 (+ 1 (^ rho 2))))"), 1.0)
    out = B.scale_conjugate(a, 3, 5, 1.0, ONE)
    assert S.to_text(out) == S.to_text(E.mul(part.psi(3), a, part.psi(5, "r'")))
    out = B.scale_conjugate(E.ONE, 3, 5, 0.5, SINH)
    assert S.to_text(out) == S.to_text(E.mul(part.psi(3), part.psi(5, "r'")))


def test_scale_conjugate_dilates_angles():
    a = S.parse_symbol("(* (cos theta1) eta1)")
    L = np.sinh(4.0)
    out = B.scale_conjugate(a, 4, 4, 1.0, SINH)
    val = complex(np.asarray(E.evaluate(out, {"r": 4.0, "r'": 4.0, "theta1": 1.0, "eta1": 2.0})))
    assert val == pytest.approx(np.cos(1.0 / L) * 2.0 * L, rel=1e-13)


def test_dilation_is_unitary():
    u = Q.random_bandlimited(GRID, 0)
    L = np.sinh(3.0)
    v = B.dilate(u, L)
    assert v.norm() == pytest.approx(u.norm(), rel=1e-14)
    back = B.undilate(v, L)
    np.testing.assert_allclose(back.values, u.values, atol=1e-15)
    assert back.grid.theta_period == pytest.approx(GRID.theta_period)


# block norms ------------------------------------------------------------------

@pytest.mark.parametrize("weight", [ONE, SINH])
def test_unit_symbol_diagonal_block(weight):
    op, g = B.block_operator(E.ONE, 4, 4, 1.0, weight, GRID)
    psi2 = np.asarray(E.evaluate(B.DEFAULT_PARTITION.psi(4), {"r": GRID.r()})) ** 2
    assert op.norm_exact() == pytest.approx(psi2.max(), abs=1e-6)


def test_unit_symbol_separated_blocks_vanish():
    assert B.block_norm(E.ONE, 2, 5, 1.0, SINH, GRID).value == 0.0
    op, _ = B.block_operator(E.ONE, 3, 5, 1.0, ONE, GRID)
    assert op.norm_exact() <= 1e-14


def test_far_block_matches_rank_one_kernel():
    # for disjoint supports the eta = 0 kernel (1/2) exp(-|r - r'|) psi_3(r) psi_8(r')
    # factorises, and the higher angular modes decay faster
    from scipy.integrate import quad

    grid = Q.Grid(2, 256, 8, 0.5, 16.5)
    a = S.parse_symbol(RESOLVENT)
    far = B.block_norm(a, 3, 8, 1.0, SINH, grid).value
    diag = B.block_norm(a, 3, 3, 1.0, SINH, grid).value

    def psi(j):
        return lambda r: float(np.asarray(E.evaluate(B.DEFAULT_PARTITION.psi(j), {"r": r})))

    kinks = [-0.75, -0.25, 0.25, 0.75]
    left = quad(lambda r: (psi(3)(r) * np.exp(r)) ** 2, 2, 4, points=[3 + x for x in kinks])[0]
    right = quad(lambda r: (psi(8)(r) * np.exp(-r)) ** 2, 7, 9, points=[8 + x for x in kinks])[0]
    oracle = 0.5 * np.sqrt(left * right)
    # the periodic image at distance 11 contributes about exp(-6)
    assert far == pytest.approx(oracle, rel=5e-3)
    assert far <= 2e-2 * diag


def test_block_norm_needs_room():
    with pytest.raises(ValueError):
        B.block_norm(E.ONE, 1, 1, 1.0, ONE, GRID)


def test_block_report_files(tmp_path):
    a = S.parse_symbol(RESOLVENT)
    rep = B.block_report(a, [(3, 3), (3, 4), (4, 3)], 1.0, ONE, GRID)
    rep.write_csv(tmp_path / "blocks.csv")
    rep.write_summary(tmp_path / "summary.json")
    lines = (tmp_path / "blocks.csv").read_text().splitlines()
    assert lines[0] == "j,k,norm,iterations,converged"
    assert len(lines) == 4
    assert rep.summary()["n_blocks"] == 3


# decay fits -------------------------------------------------------------------

def test_fit_decay_floor_pass():
    norms = {(j, k): (1.0 if abs(j - k) <= 1 else 0.0) for j in range(8) for k in range(8)}
    fit = B.fit_decay(norms)
    assert fit["decayed_to_floor"] and fit["passed"]


def test_fit_decay_recovers_power_law():
    norms = {(0, d): 2.0 * (1 + d * d) ** -2.5 for d in range(7)}
    fit = B.fit_decay(norms)
    assert fit["slope"] == pytest.approx(-5.0, abs=1e-12)
    assert fit["passed"]
    slow = {(0, d): (1 + d * d) ** -0.5 for d in range(7)}
    assert not B.fit_decay(slow)["passed"]


def test_unit_symbol_decay_report():
    rep = B.offdiagonal_decay_fit(E.ONE, 1.0, ONE, (2, 8), Q.Grid(2, 64, 8, 0.0, 12.0),
                                  separations=(0, 2, 3, 4, 5, 6))
    assert all(v == 0.0 for (j, k), v in rep.norms.items() if abs(j - k) >= 2)
    assert rep.decay_fit["decayed_to_floor"]


# Cotlar-Stein aggregation ------------------------------------------------------

def test_cotlar_single_and_disjoint_blocks():
    assert B.cotlar_stein_bound({(0, 0): 0.7}) == pytest.approx(0.7)
    assert B.cotlar_stein_bound({(0, 0): 0.7, (5, 5): 0.7}) == pytest.approx(0.7)
    assert B.cotlar_stein_bound({}) == 0.0


@given(st.dictionaries(st.tuples(st.integers(0, 6), st.integers(0, 6)),
                       st.one_of(st.just(0.0), st.floats(1e-100, 10.0)), min_size=1, max_size=20))
def test_cotlar_dominates_every_block(norms):
    assert B.cotlar_stein_bound(norms) >= max(norms.values()) * (1 - 1e-12)


def test_cotlar_is_valid_for_unit_symbol():
    grid = Q.Grid(2, 64, 8, 0.0, 12.0)
    js = range(3, 9)
    rep = B.block_report(E.ONE, [(j, k) for j in js for k in js], 1.0, ONE, grid)
    bound = B.cotlar_stein_bound(rep)
    direct = B.window_norm(E.ONE, js, 1.0, grid, exact=True).value
    assert direct <= bound * (1 + 1e-6)
    assert bound <= 20 * direct


# semiclassical scans ---------------------------------------------------------

def test_semiclassical_constant_symbol():
    out = B.semiclassical_block_scan(S.parse_symbol("2"), 1.0, ONE, [0.25, 0.5, 1.0], GRID,
                                     j=4)
    assert abs(out["c1"]) <= 1e-6
    assert max(out["norms"]) - min(out["norms"]) <= 1e-6


def test_semiclassical_position_symbol_is_hbar_free():
    a = S.parse_symbol("(+ 2 (sin r))")
    out = B.semiclassical_block_scan(a, 1.0, ONE, [0.1, 0.3, 1.0], GRID, j=4)
    assert max(out["norms"]) - min(out["norms"]) <= 1e-6 * max(out["norms"])


def test_semiclassical_scan_guards():
    with pytest.raises(ValueError):
        B.semiclassical_block_scan(E.ONE, 1.0, ONE, [0.5, 1.0], GRID)
    with pytest.raises(ValueError):
        B.semiclassical_block_scan(E.ONE, 1.0, ONE, [0.0, 0.5, 1.0], GRID)
