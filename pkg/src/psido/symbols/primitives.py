"""One-dimensional primitives with exact derivatives of every order.

``flat``        exp(-1/x) for x > 0, 0 otherwise.
``smoothstep``  flat(x) / (flat(x) + flat(1 - x)); 0 for x <= 0, 1 for x >= 1.
``erfstep``     (1 + erf x) / 2; Gaussian-type transition with a rapidly
                decaying spectrum.

Compactly supported steps have spectra that decay only like
``exp(-c sqrt(xi))``; the erf step is the choice whenever a cutoff is
differentiated spectrally to high accuracy.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.hermite import hermval
from scipy.special import erfc

_U_CUTOFF = 700.0  # exp(-700) ~ 1e-304: treat flat(x) as 0 for 1/x beyond this


def _flat_polys(kmax: int) -> list:
    # d^k/dx^k exp(-1/x) = P_k(1/x) exp(-1/x),  P_{k+1}(u) = u^2 (P_k - P_k').
    u2 = Polynomial([0.0, 0.0, 1.0])
    polys = [Polynomial([1.0])]
    for _ in range(kmax):
        p = polys[-1]
        polys.append(u2 * (p - p.deriv()))
    return polys


_FLAT = _flat_polys(32)


def flat(k: int, x):
    """k-th derivative of exp(-1/x) (zero for x <= 0)."""
    if k >= len(_FLAT):
        raise ValueError(f"flat derivative order {k} not tabulated")
    x = np.asarray(x, dtype=float)
    out = np.zeros_like(x)
    live = x > 1.0 / _U_CUTOFF
    u = 1.0 / x[live]
    out[live] = _FLAT[k](u) * np.exp(-u)
    return out


def _flat_jet(K: int, x):
    """Taylor coefficients f^(j)(x)/j!, j = 0..K, stacked on axis 0."""
    return np.stack([flat(j, x) / math.factorial(j) for j in range(K + 1)])


def smoothstep(k: int, x):
    """k-th derivative of the compact smoothstep via Taylor-jet division."""
    x = np.asarray(x, dtype=float)
    a = _flat_jet(k, x)
    b = _flat_jet(k, 1.0 - x)
    b *= ((-1.0) ** np.arange(k + 1)).reshape((-1,) + (1,) * x.ndim)
    d = a + b
    q = np.empty_like(a)
    for j in range(k + 1):
        acc = a[j].copy()
        for i in range(1, j + 1):
            acc -= d[i] * q[j - i]
        q[j] = acc / d[0]
    out = q[k] * math.factorial(k)
    if k == 0:
        # exact plateau values away from the transition
        out = np.where(x <= 0.0, 0.0, np.where(x >= 1.0, 1.0, out))
    else:
        out = np.where((x <= 0.0) | (x >= 1.0), 0.0, out)
    return out


_SQRT_PI = math.sqrt(math.pi)


def erfstep(k: int, x):
    """k-th derivative of (1 + erf x)/2."""
    x = np.asarray(x, dtype=float)
    if k == 0:
        return 0.5 * erfc(-x)
    coef = np.zeros(k)
    coef[k - 1] = 1.0
    return (-1.0) ** (k - 1) * hermval(x, coef) * np.exp(-x * x) / _SQRT_PI


PRIMITIVES = {
    "flat": flat,
    "smoothstep": smoothstep,
    "erfstep": erfstep,
}


def eval_primitive(name: str, k: int, x):
    try:
        fn = PRIMITIVES[name]
    except KeyError:
        raise ValueError(f"unknown primitive {name!r}") from None
    return fn(k, x)
