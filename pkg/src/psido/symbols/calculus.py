"""Weighted derivatives, symbol-class seminorms, freezing and adjoints.

Seminorms are sups over finite lattices: ``r`` uniform in a window, ``theta``
uniform on the circle and the momentum on log-spaced shells in the weighted
variables ``(rho, lambda^{-1} eta)``.  A symbol is taken to belong to a class
when its estimate is finite and moves by at most 10% when the lattice is
doubled.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import expr as E


@dataclass(frozen=True)
class SymbolClassTag:
    """Order ``m``, gain ``sigma`` per momentum derivative, weight, optional ``t``."""

    m: float
    sigma: float
    weight: object
    bisymbol_t: float | None = None

    def __post_init__(self):
        if not 0.0 <= self.sigma <= 1.0:
            raise ValueError("sigma must lie in [0, 1]")
        if self.bisymbol_t is not None and not 0.0 <= self.bisymbol_t <= 1.0:
            raise ValueError("t must lie in [0, 1]")


@dataclass
class SeminormEstimate:
    M: int
    value: float
    lattice: dict
    per_multiindex: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"M": self.M, "value": self.value, "lattice": self.lattice,
                "per_multiindex": {str(k): v for k, v in self.per_multiindex.items()}}


def multi_indices(dim: int, max_total: int):
    """All nonnegative integer tuples of length ``dim`` with sum <= max_total,
    ordered by total degree then lexicographically."""
    out = []
    for total in range(max_total + 1):
        for combo in itertools.product(range(total + 1), repeat=dim):
            if sum(combo) == total:
                out.append(combo)
    return out


def weighted_derivative(a: E.Expr, A, B, weight) -> E.Expr:
    """``(lambda^{-1} d_theta)^alpha (lambda d_eta)^beta d_r^alpha0 d_rho^beta0 a``.

    ``A = (alpha0, alpha_1, ...)`` and ``B = (beta0, beta_1, ...)``.  The
    weight factors depend on ``r`` only and the r-derivative acts first, so
    the composite equals ``lambda^{|beta| - |alpha|}`` times the plain partial
    derivative.
    """
    A = tuple(A)
    B = tuple(B)
    n = len(A)
    if len(B) != n:
        raise E.SymbolError("A and B must have the same length")
    counts = [("rho", B[0]), ("r", A[0])]
    counts += [(f"eta{i}", B[i]) for i in range(1, n)]
    counts += [(f"theta{i}", A[i]) for i in range(1, n)]
    d = E.diff_multi(a, counts)
    power = sum(B[1:]) - sum(A[1:])
    if power == 0 or d is E.ZERO:
        return d
    return E.mul(E.ipow(E.lam(weight), power), d)


def freeze_bisymbol(a0: E.Expr, t: float, n: int = 2) -> E.Expr:
    """``a0(t q + (1 - t) q', p)``."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t == 1.0:
        return a0
    mapping = {}
    for name, pname in zip(E.q_names(n), E.qp_names(n)):
        if t == 0.0:
            mapping[name] = E.Coord(pname)
        else:
            mapping[name] = E.add(E.mul(t, E.Coord(name)), E.mul(1.0 - t, E.Coord(pname)))
    return E.substitute(a0, mapping)


def swap_q(a: E.Expr, n: int = 2) -> E.Expr:
    mapping = {}
    for name, pname in zip(E.q_names(n), E.qp_names(n)):
        mapping[name] = E.Coord(pname)
        mapping[pname] = E.Coord(name)
    return E.substitute(a, mapping)


def adjoint_bisymbol(a: E.Expr, n: int = 2) -> E.Expr:
    """``conj(a(q', p, q))``."""
    return E.conjugate(swap_q(a, n))


def semiclassical_symbol(a: E.Expr, hbar, n: int = 2) -> E.Expr:
    """``a(q, hbar p)``; ``hbar`` may be a number or a tree."""
    h = E.as_expr(hbar)
    return E.substitute(a, {name: E.mul(h, E.Coord(name)) for name in E.p_names(n)})


# lattices ---------------------------------------------------------------------

def _directions(n: int, count: int) -> np.ndarray:
    if n == 2:
        phi = (np.arange(count) + 0.5) * (2.0 * np.pi / count)
        return np.stack([np.cos(phi), np.sin(phi)], axis=1)
    if n == 3:
        k = np.arange(count) + 0.5
        z = 1.0 - 2.0 * k / count
        rad = np.sqrt(1.0 - z * z)
        golden = np.pi * (3.0 - np.sqrt(5.0))
        phi = golden * k
        return np.stack([z, rad * np.cos(phi), rad * np.sin(phi)], axis=1)
    raise ValueError("only n = 2 or 3 is supported")


@dataclass(frozen=True)
class SymbolLattice:
    """Sample set over ``(r, theta, rho, lambda^{-1} eta)``.

    Momenta are ``radius * direction`` in the weighted variables plus the
    origin; radii are ``10**(k * step)`` for ``k`` in an integer range, so
    the set always contains the unit shell and refinement is nested.
    """

    n: int = 2
    r_window: tuple = (1.0, 10.0)
    n_r: int = 33
    n_theta: int = 4
    log10_min: float = -1.0
    log10_max: float = 3.0
    log_step: float = 0.0625
    n_dirs: int = 32
    theta_window: tuple | None = None

    def r_values(self) -> np.ndarray:
        return np.linspace(self.r_window[0], self.r_window[1], self.n_r)

    def theta_values(self) -> np.ndarray:
        """Angular samples, shape (n_theta**(n-1), n-1).

        Uniform on the circle, or on ``theta_window`` (endpoints included)
        for charts whose second coordinate is not an angle.
        """
        if self.theta_window is None:
            th = np.arange(self.n_theta) * (2.0 * np.pi / self.n_theta)
        else:
            th = np.linspace(self.theta_window[0], self.theta_window[1], self.n_theta + 1)
        grids = np.meshgrid(*([th] * (self.n - 1)), indexing="ij")
        return np.stack([g.ravel() for g in grids], axis=1)

    def radii(self) -> np.ndarray:
        k0 = math.ceil(self.log10_min / self.log_step - 1e-9)
        k1 = math.floor(self.log10_max / self.log_step + 1e-9)
        return 10.0 ** (np.arange(k0, k1 + 1) * self.log_step)

    def momenta(self) -> np.ndarray:
        """Weighted momenta ``(rho, zeta_1, ...)``, shape (K, n)."""
        dirs = _directions(self.n, self.n_dirs)
        pts = (self.radii()[:, None, None] * dirs[None, :, :]).reshape(-1, self.n)
        return np.vstack([np.zeros((1, self.n)), pts])

    def refine(self) -> SymbolLattice:
        return replace(self, n_r=2 * self.n_r - 1, n_theta=2 * self.n_theta,
                       log_step=self.log_step / 2.0, n_dirs=2 * self.n_dirs)

    def describe(self) -> dict:
        out = {"n": self.n, "r_window": list(self.r_window), "n_r": self.n_r,
                "n_theta": self.n_theta, "log10_range": [self.log10_min, self.log10_max],
                "log_step": self.log_step, "n_dirs": self.n_dirs,
                "n_points": int(self.n_r * self.theta_values().shape[0]
                                * self.momenta().shape[0])}
        if self.theta_window is not None:
            out["theta_window"] = list(self.theta_window)
        return out


@dataclass(frozen=True)
class BisymbolLattice:
    """Sample set for bisymbol seminorms: unit cells ``|r - j| <= 1, |r' - k| <= 1``."""

    n: int = 2
    j_range: tuple = (2, 6)
    k_range: tuple = (2, 6)
    n_local: int = 5
    n_theta: int = 2
    log10_min: float = -1.0
    log10_max: float = 3.0
    log_step: float = 0.5
    n_dirs: int = 6

    def pairs(self):
        return [(j, k) for j in range(self.j_range[0], self.j_range[1] + 1)
                for k in range(self.k_range[0], self.k_range[1] + 1)]

    def momentum_lattice(self) -> SymbolLattice:
        return SymbolLattice(n=self.n, log10_min=self.log10_min, log10_max=self.log10_max,
                             log_step=self.log_step, n_dirs=self.n_dirs,
                             n_theta=self.n_theta)

    def refine(self) -> BisymbolLattice:
        return replace(self, n_local=2 * self.n_local - 1, n_theta=2 * self.n_theta,
                       log_step=self.log_step / 2.0, n_dirs=2 * self.n_dirs)

    def describe(self) -> dict:
        return {"n": self.n, "j_range": list(self.j_range), "k_range": list(self.k_range),
                "n_local": self.n_local, "n_theta": self.n_theta,
                "log10_range": [self.log10_min, self.log10_max],
                "log_step": self.log_step, "n_dirs": self.n_dirs}


def _check_finite(vals, what: str):
    if not np.all(np.isfinite(vals)):
        raise E.SymbolPoleError(f"non-finite values while estimating {what}")


def estimate_seminorm(a: E.Expr, tag: SymbolClassTag, M: int,
                      lattice: SymbolLattice, params: dict | None = None
                      ) -> SeminormEstimate:
    """Sum over ``|A| + |B| <= M`` of the lattice sup of the weighted derivative
    times ``<rho (+) lambda^{-1} eta>^{-m + sigma |B|}``."""
    n = lattice.n
    if any(c.endswith("'") for c in a.free):
        raise E.SymbolError("estimate_seminorm takes symbols without q' coordinates")
    w = tag.weight
    r = lattice.r_values()
    if not w.contains(r):
        raise E.SymbolError("seminorm lattice leaves the weight's r_domain")
    th = lattice.theta_values()
    mom = lattice.momenta()
    lam = np.asarray(w.eval(r), dtype=float)
    env = {"r": r[:, None, None]}
    for i in range(1, n):
        env[f"theta{i}"] = th[None, :, i - 1, None]
    env["rho"] = mom[None, None, :, 0]
    for i in range(1, n):
        env[f"eta{i}"] = lam[:, None, None] * mom[None, None, :, i]
    env = E.bind_params(env, params)
    bracket2 = 1.0 + np.sum(mom * mom, axis=1)[None, None, :]
    per = {}
    total = 0.0
    for idx in multi_indices(2 * n, M):
        A, B = idx[:n], idx[n:]
        d = weighted_derivative(a, A, B, w)
        if d is E.ZERO:
            per[(A, B)] = 0.0
            continue
        vals = np.abs(E.evaluate(d, env))
        expo = -tag.m + tag.sigma * sum(B)
        weighted = vals * bracket2 ** (0.5 * expo)
        _check_finite(weighted, "seminorm")
        s = float(np.max(weighted))
        per[(A, B)] = s
        total += s
    return SeminormEstimate(M=M, value=total, lattice=lattice.describe(),
                            per_multiindex=per)


def estimate_bisymbol_seminorm(a: E.Expr, tag: SymbolClassTag, M: int,
                               lattice: BisymbolLattice, params: dict | None = None
                               ) -> SeminormEstimate:
    """Double sup over cells ``(j, k)`` with the weight frozen at
    ``lambda(t j + (1 - t) k)`` in every weighted derivative and bracket."""
    if tag.bisymbol_t is None:
        raise ValueError("bisymbol seminorm needs a tag with bisymbol_t")
    n = lattice.n
    t = tag.bisymbol_t
    w = tag.weight
    ml = lattice.momentum_lattice()
    th = ml.theta_values()
    mom = ml.momenta()
    bracket2 = 1.0 + np.sum(mom * mom, axis=1)
    loc = np.linspace(-1.0, 1.0, lattice.n_local)
    T = th.shape[0]
    # axes: (r, r', theta, theta', momentum)
    shape5 = lambda x, ax: np.reshape(x, [-1 if i == ax else 1 for i in range(5)])
    indices = multi_indices(3 * n, M)
    derivs = []
    for idx in indices:
        A, B, Ap = idx[:n], idx[n:2 * n], idx[2 * n:]
        counts = [("rho", B[0]), ("r", A[0]), ("r'", Ap[0])]
        counts += [(f"eta{i}", B[i]) for i in range(1, n)]
        counts += [(f"theta{i}", A[i]) for i in range(1, n)]
        counts += [(f"theta{i}'", Ap[i]) for i in range(1, n)]
        derivs.append((A, B, Ap, E.diff_multi(a, counts)))
    per = {}
    for (j, k) in lattice.pairs():
        centre = t * j + (1.0 - t) * k
        if not w.contains(centre):
            raise E.SymbolError(f"frozen point {centre} leaves the weight's r_domain")
        lam_jk = float(w.eval(centre))
        env = {"r": shape5(j + loc, 0), "r'": shape5(k + loc, 1)}
        for i in range(1, n):
            env[f"theta{i}"] = shape5(th[:, i - 1], 2)
            env[f"theta{i}'"] = shape5(th[:, i - 1], 3)
        env["rho"] = shape5(mom[:, 0], 4)
        for i in range(1, n):
            env[f"eta{i}"] = shape5(lam_jk * mom[:, i], 4)
        env = E.bind_params(env, params)
        for A, B, Ap, d in derivs:
            key = (A, B, Ap)
            if d is E.ZERO:
                per.setdefault(key, 0.0)
                continue
            power = sum(B[1:]) - sum(A[1:]) - sum(Ap[1:])
            vals = np.abs(E.evaluate(d, env)) * lam_jk ** power
            expo = -tag.m + tag.sigma * sum(B)
            weighted = vals * shape5(bracket2, 4) ** (0.5 * expo)
            _check_finite(weighted, "bisymbol seminorm")
            per[key] = max(per.get(key, 0.0), float(np.max(weighted)))
    total = float(sum(per[k] for k in sorted(per)))
    desc = lattice.describe()
    desc["theta_samples"] = int(T)
    return SeminormEstimate(M=M, value=total, lattice=desc, per_multiindex=per)


@dataclass
class RefinementCheck:
    coarse: float
    fine: float
    relative_change: float
    stable: bool

    def to_dict(self) -> dict:
        return dict(coarse=self.coarse, fine=self.fine,
                    relative_change=self.relative_change, stable=self.stable)


def refinement_check(estimator, a, tag, M, lattice, params=None,
                     tolerance: float = 0.10) -> RefinementCheck:
    """Compare an estimate with the one on the doubled lattice."""
    c = estimator(a, tag, M, lattice, params).value
    f = estimator(a, tag, M, lattice.refine(), params).value
    scale = max(abs(c), abs(f))
    rel = 0.0 if scale == 0.0 else abs(f - c) / scale
    return RefinementCheck(c, f, rel, bool(np.isfinite(rel) and rel <= tolerance))
