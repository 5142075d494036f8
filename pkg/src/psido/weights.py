"""Radial weight functions and sampling-based admissibility certificates.

A weight is a positive smooth function ``lambda(r)`` that sets the scale of
the angular directions at radius ``r``.  Every weight carries an explicit
interval of validity and exact evaluators for ``d^j/dr^j log lambda``; symbol
trees only ever see the weight through these evaluators.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import Polynomial

KINDS = ("constant", "linear_conical", "sinh_hyperbolic", "exp", "custom")

# Builtin kinds have closed-form log-derivatives of every order; this is the
# order up to which the recursion is allowed to go.
BUILTIN_JMAX = 64


class WeightError(ValueError):
    """Invalid weight specification or derivative request."""


@dataclass(frozen=True, eq=False)
class WeightFunction:
    """A positive weight ``lambda(r)`` with exact log-derivatives.

    Parameters
    ----------
    kind : str
        One of ``KINDS``.
    params : tuple of float
        Kind-specific parameters (see :func:`make_weight`).
    r_domain : (float, float)
        Closed interval on which the weight is certified.
    jmax : int
        Highest order ``j`` for which ``log_deriv(j, r)`` is available.
    """

    kind: str
    params: tuple
    r_domain: tuple
    jmax: int
    _eval: Callable = field(repr=False)
    _log_deriv: Callable = field(repr=False)
    name: str = ""

    def eval(self, r):
        return self._eval(np.asarray(r, dtype=float))

    def log_deriv(self, j: int, r):
        """Return ``d^j/dr^j log lambda(r)`` for ``j >= 1``."""
        if j < 1:
            raise WeightError("log_deriv needs j >= 1; use eval for j = 0")
        if j > self.jmax:
            raise WeightError(
                f"log-derivative of order {j} exceeds jmax={self.jmax} "
                f"for weight {self.label}")
        return self._log_deriv(j, np.asarray(r, dtype=float))

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def is_constant(self) -> bool:
        return self.kind == "constant"

    def contains(self, r) -> bool:
        r = np.asarray(r, dtype=float)
        lo, hi = self.r_domain
        return bool(np.all((r >= lo) & (r <= hi)))

    def describe(self) -> dict:
        lo, hi = self.r_domain
        return {"kind": self.kind, "params": list(self.params),
                "r_domain": [lo, hi], "name": self.label}


def _sinh_logderiv_polys(jmax: int) -> list:
    # d/dr coth = 1 - coth^2, so d^j log sinh is a polynomial Q_j(coth r)
    # with Q_1(c) = c and Q_{j+1}(c) = Q_j'(c) (1 - c^2).
    one_minus_c2 = Polynomial([1.0, 0.0, -1.0])
    polys = [None, Polynomial([0.0, 1.0])]
    for _ in range(2, jmax + 1):
        polys.append(polys[-1].deriv() * one_minus_c2)
    return polys


_SINH_POLYS = _sinh_logderiv_polys(24)


def _sinh_log_deriv(j, r):
    if j >= len(_SINH_POLYS):
        raise WeightError(f"sinh log-derivative order {j} not tabulated")
    return _SINH_POLYS[j](1.0 / np.tanh(r))


def _check_positive(w: WeightFunction) -> None:
    lo, hi = w.r_domain
    if not (lo <= hi):
        raise WeightError(f"empty r_domain {w.r_domain}")
    # infinite ends are probed over a window of length 100
    if math.isfinite(lo):
        lo_s = lo
        hi_s = hi if math.isfinite(hi) else lo + 100.0
    else:
        hi_s = hi if math.isfinite(hi) else 50.0
        lo_s = hi_s - 100.0
    samples = np.linspace(lo_s, hi_s, 2001)
    with np.errstate(all="ignore"):
        vals = w.eval(samples)
    if not np.all(np.isfinite(vals)) or np.any(vals <= 0):
        raise WeightError(
            f"weight {w.label} is not positive and finite on r_domain {w.r_domain}")


def make_weight(kind: str, params: Sequence[float] = (),
                r_domain: Sequence[float] = (-math.inf, math.inf),
                name: str = "") -> WeightFunction:
    """Build a builtin weight.

    ``constant``: ``[c]`` (default ``c = 1``), ``lambda = c``.
    ``linear_conical``: ``[] | [a] | [a, b]``, ``lambda = a r + b``.
    ``sinh_hyperbolic``: ``[] | [c]``, ``lambda = c sinh r``.
    ``exp``: ``[] | [a] | [a, c]``, ``lambda = c exp(a r)``.

    Custom weights are built with :func:`make_custom_weight`.
    """
    params = tuple(float(p) for p in params)
    r_domain = (float(r_domain[0]), float(r_domain[1]))
    if kind == "constant":
        if len(params) > 1:
            raise WeightError("constant weight takes at most one parameter")
        c = params[0] if params else 1.0
        ev = lambda r, c=c: np.full(np.shape(r), c)
        ld = lambda j, r: np.zeros(np.shape(r))
    elif kind == "linear_conical":
        if len(params) > 2:
            raise WeightError("linear_conical takes at most two parameters")
        a = params[0] if params else 1.0
        b = params[1] if len(params) > 1 else 0.0
        if a == 0.0:
            raise WeightError("linear_conical slope must be nonzero")
        ev = lambda r, a=a, b=b: a * r + b

        def ld(j, r, a=a, b=b):
            return (-1.0) ** (j - 1) * math.factorial(j - 1) * (a / (a * r + b)) ** j
    elif kind == "sinh_hyperbolic":
        if len(params) > 1:
            raise WeightError("sinh_hyperbolic takes at most one parameter")
        c = params[0] if params else 1.0
        ev = lambda r, c=c: c * np.sinh(r)
        ld = _sinh_log_deriv
    elif kind == "exp":
        if len(params) > 2:
            raise WeightError("exp takes at most two parameters")
        a = params[0] if params else 1.0
        c = params[1] if len(params) > 1 else 1.0
        ev = lambda r, a=a, c=c: c * np.exp(a * r)

        def ld(j, r, a=a):
            return np.full(np.shape(r), a if j == 1 else 0.0)
    elif kind == "custom":
        raise WeightError("custom weights are built with make_custom_weight")
    else:
        raise WeightError(f"unknown weight kind {kind!r}")
    jmax = len(_SINH_POLYS) - 1 if kind == "sinh_hyperbolic" else BUILTIN_JMAX
    w = WeightFunction(kind, params, r_domain, jmax, ev, ld, name)
    _check_positive(w)
    return w


def make_custom_weight(eval_fn: Callable, log_derivs: Sequence[Callable],
                       r_domain: Sequence[float], name: str = "custom") -> WeightFunction:
    """Wrap a user weight; ``log_derivs[j-1]`` must evaluate ``d^j log lambda``."""
    derivs = tuple(log_derivs)

    def ld(j, r):
        return np.asarray(derivs[j - 1](r), dtype=float) * np.ones(np.shape(r))

    w = WeightFunction("custom", (), (float(r_domain[0]), float(r_domain[1])),
                       len(derivs), lambda r: np.asarray(eval_fn(r), dtype=float),
                       ld, name)
    _check_positive(w)
    return w


@dataclass
class WeightCertificate:
    """Sampled constants certifying a weight's admissibility."""

    slow_variation_C: float = 1.0
    log_deriv_bounds: list = field(default_factory=list)
    jmax: int = 0
    lattice: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    threshold: float = math.inf
    passed: bool = True

    def to_dict(self) -> dict:
        return {
            "slow_variation_C": self.slow_variation_C,
            "log_deriv_bounds": [[j, b] for j, b in self.log_deriv_bounds],
            "jmax": self.jmax,
            "lattice": {"n": int(self.lattice.size),
                        "min": float(self.lattice.min()) if self.lattice.size else None,
                        "max": float(self.lattice.max()) if self.lattice.size else None},
            "threshold": self.threshold,
            "passed": self.passed,
        }


def default_lattice(w: WeightFunction, points_per_unit: int = 16,
                    window: Sequence[float] | None = None) -> np.ndarray:
    """Uniform r-lattice over the (finite part of the) weight's domain."""
    lo, hi = window if window is not None else w.r_domain
    if not math.isfinite(lo):
        lo = -20.0 if not math.isfinite(hi) else hi - 40.0
    if not math.isfinite(hi):
        hi = lo + 40.0
    n = int(round((hi - lo) * points_per_unit)) + 1
    return np.linspace(lo, hi, max(n, 2))


def check_slow_variation(w: WeightFunction, lattice, threshold: float = math.inf
                         ) -> WeightCertificate:
    """Sup of ``lambda(r)/lambda(r')`` over lattice pairs with ``|r - r'| <= 1``."""
    r = np.sort(np.asarray(lattice, dtype=float).ravel())
    if r.size == 0:
        raise WeightError("empty lattice")
    if not w.contains(r):
        raise WeightError("lattice leaves the weight's r_domain")
    with np.errstate(over="ignore"):
        log_lam = np.log(w.eval(r))
    worst = 0.0
    tol = 1e-12
    for d in range(1, r.size):
        close = (r[d:] - r[:-d]) <= 1.0 + tol
        if not close.any():
            break
        gap = np.abs(log_lam[d:] - log_lam[:-d])[close]
        worst = max(worst, float(gap.max()))
    C = float(np.exp(worst))
    return WeightCertificate(slow_variation_C=C, lattice=r, threshold=threshold,
                             passed=bool(np.isfinite(C) and C <= threshold))


def check_log_derivative_bounds(w: WeightFunction, jmax: int, lattice,
                                threshold: float = math.inf) -> WeightCertificate:
    """Sup over the lattice of ``|d^j log lambda|`` for ``1 <= j <= jmax``."""
    if jmax < 1:
        raise WeightError("jmax must be >= 1")
    if jmax > w.jmax:
        raise WeightError(
            f"weight {w.label} provides log-derivatives only up to order {w.jmax}")
    r = np.sort(np.asarray(lattice, dtype=float).ravel())
    if r.size == 0:
        raise WeightError("empty lattice")
    bounds = []
    for j in range(1, jmax + 1):
        bounds.append((j, float(np.max(np.abs(w.log_deriv(j, r))))))
    ok = all(np.isfinite(b) and b <= threshold for _, b in bounds)
    return WeightCertificate(log_deriv_bounds=bounds, jmax=jmax, lattice=r,
                             threshold=threshold, passed=ok)


def weight_from_config(section: dict) -> WeightFunction:
    """Build a weight from a ``weight`` config table."""
    kind = section.get("kind", "constant")
    params = section.get("params", [])
    lo = section.get("r_min", -math.inf)
    hi = section.get("r_max", math.inf)
    return make_weight(kind, params, (lo, hi))
