import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from psido import weights as W

BUILTINS = [("constant", (2.0,), (-10.0, 10.0)),
            ("linear_conical", (), (1.0, 20.0)),
            ("linear_conical", (0.5, 2.0), (0.0, 20.0)),
            ("sinh_hyperbolic", (), (1.0, 20.0)),
            ("sinh_hyperbolic", (3.0,), (0.5, 15.0)),
            ("exp", (), (-5.0, 5.0)),
            ("exp", (0.3, 2.0), (-5.0, 5.0))]


def test_constant_weight():
    w = W.make_weight("constant", [1], (-10, 10))
    r = np.linspace(-10, 10, 7)
    assert np.all(w.eval(r) == 1.0)
    for j in range(1, 4):
        assert np.all(w.log_deriv(j, r) == 0.0)


def test_sinh_weight():
    w = W.make_weight("sinh_hyperbolic", [], (1, 20))
    r = np.linspace(1, 20, 11)
    np.testing.assert_allclose(w.eval(r), np.sinh(r), rtol=1e-15)
    np.testing.assert_allclose(w.log_deriv(1, r), 1 / np.tanh(r), rtol=1e-14)


def test_conical_weight():
    w = W.make_weight("linear_conical", [], (1, 20))
    r = np.linspace(1, 20, 11)
    np.testing.assert_allclose(w.eval(r), r)
    np.testing.assert_allclose(w.log_deriv(1, r), 1 / r, rtol=1e-15)


@pytest.mark.parametrize("kind,params,dom", BUILTINS)
def test_log_derivs_match_finite_differences(kind, params, dom):
    w = W.make_weight(kind, params, dom)
    h = 1e-4
    r = np.linspace(dom[0] + 0.1, dom[1] - 0.1, 23)
    logl = lambda x: np.log(w.eval(x))
    fd = [(logl(r + h) - logl(r - h)) / (2 * h),
          (logl(r + h) - 2 * logl(r) + logl(r - h)) / h**2]
    for j, approx in enumerate(fd, start=1):
        exact = w.log_deriv(j, r)
        scale = np.maximum(np.abs(exact), 1e-2)
        assert np.max(np.abs(approx - exact) / scale) <= 1e-6 * (1e2 if j == 2 else 1)


@pytest.mark.parametrize("kind,params,dom", BUILTINS)
def test_higher_log_derivs_chain(kind, params, dom):
    # d^{j+1} log lambda is the derivative of d^j log lambda
    w = W.make_weight(kind, params, dom)
    h = 1e-5
    r = np.linspace(dom[0] + 0.2, dom[1] - 0.2, 17)
    for j in range(1, 4):
        fd = (w.log_deriv(j, r + h) - w.log_deriv(j, r - h)) / (2 * h)
        exact = w.log_deriv(j + 1, r)
        assert np.allclose(fd, exact, rtol=1e-6, atol=1e-7)


def test_positivity_and_errors():
    with pytest.raises(W.WeightError):
        W.make_weight("linear_conical", [], (-1.0, 2.0))
    with pytest.raises(W.WeightError):
        W.make_weight("bogus")
    with pytest.raises(W.WeightError):
        W.make_weight("constant", [1, 2])
    w = W.make_weight("sinh_hyperbolic", [], (1, 20))
    with pytest.raises(W.WeightError):
        w.log_deriv(0, 1.0)


def test_slow_variation_exp_converges_to_e():
    w = W.make_weight("exp")
    coarse = W.check_slow_variation(w, np.linspace(0, 10, 11)).slow_variation_C
    fine = W.check_slow_variation(w, np.linspace(0, 10, 401)).slow_variation_C
    assert abs(fine - math.e) <= 1e-9
    assert abs(coarse - math.e) <= 1e-9


def test_slow_variation_constant_is_one():
    w = W.make_weight("constant")
    assert W.check_slow_variation(w, np.linspace(-3, 3, 50)).slow_variation_C == 1.0


def test_slow_variation_fails_for_gaussian_growth():
    w = W.make_custom_weight(lambda r: np.exp(r**2), [lambda r: 2 * r, lambda r: 2.0 + 0 * r],
                             (1.0, 10.0))
    cert = W.check_slow_variation(w, np.linspace(1, 10, 91), threshold=100.0)
    assert not cert.passed
    assert cert.slow_variation_C >= math.exp(11) * (1 - 1e-12)


def test_log_derivative_bounds_sinh():
    w = W.make_weight("sinh_hyperbolic", [], (1, 20))
    cert = W.check_log_derivative_bounds(w, 3, W.default_lattice(w))
    b = dict(cert.log_deriv_bounds)
    assert b[1] == pytest.approx(1 / math.tanh(1), rel=1e-12)
    assert b[1] == pytest.approx(1.31304, abs=1e-5)
    assert b[2] == pytest.approx(1 / math.sinh(1) ** 2, rel=1e-12)
    assert all(np.isfinite(v) for v in b.values())


def test_log_derivative_bounds_trivial_cases():
    one = W.make_weight("constant")
    assert all(v == 0 for _, v in W.check_log_derivative_bounds(
        one, 4, np.linspace(0, 5, 9)).log_deriv_bounds)
    e = W.make_weight("exp")
    b = dict(W.check_log_derivative_bounds(e, 3, np.linspace(0, 5, 9)).log_deriv_bounds)
    assert b == {1: 1.0, 2: 0.0, 3: 0.0}


def test_custom_weight_order_limit():
    w = W.make_custom_weight(lambda r: np.cosh(r), [np.tanh], (0, 5))
    with pytest.raises(W.WeightError):
        W.check_log_derivative_bounds(w, 2, np.linspace(0, 5, 5))


def test_weight_from_config():
    w = W.weight_from_config({"kind": "exp", "params": [0.5], "r_min": 0.0, "r_max": 4.0})
    assert w.eval(2.0) == pytest.approx(math.e)
    assert w.r_domain == (0.0, 4.0)


@given(st.floats(0.1, 3.0), st.floats(-2.0, 2.0), st.floats(0.0, 8.0), st.floats(0.0, 1.0))
def test_slow_variation_bound_for_exp(a, c, r, d):
    # lambda(r + d) / lambda(r) = e^{a d} <= C = e^{a}
    w = W.make_weight("exp", [a, math.exp(c)])
    C = W.check_slow_variation(w, np.linspace(0, 10, 101)).slow_variation_C
    assert w.eval(r + d) / w.eval(r) <= C * (1 + 1e-12)
