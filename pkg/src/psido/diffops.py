"""Differential operators in polar form and their action on symbols.

An operator is stored as a coefficient table ``{Gamma: a_Gamma(q)}`` for

    P = sum_Gamma a_Gamma(q) (lambda^{-1} D_theta)^gamma D_r^gamma0,

``D = -i d``.  Since ``lambda`` depends on ``r`` only it commutes with
``D_theta``, so this is already a normal form with all derivatives on the
right.  With ``weighted=True`` the derivatives are ``g^{-1/4} D g^{1/4}``,
i.e. the table describes ``g^{1/4} P g^{-1/4}``; :func:`quantized_table`
returns that table for either flag, which is what composes with ``Op^g``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from . import symbols as S
from .quantize import DensityWeight, GridFunction, fft_workers
from .symbols import expr as E
from .weights import WeightFunction


class DiffOpError(ValueError):
    """Invalid operator table or operation."""


def _key(k, n: int | None):
    if isinstance(k, str):
        k = tuple(int(x) for x in k.replace(" ", "").split(","))
    k = tuple(int(x) for x in k)
    if any(x < 0 for x in k):
        raise DiffOpError(f"negative multi-index {k}")
    if n is not None:
        if len(k) > n:
            raise DiffOpError(f"multi-index {k} too long for dimension {n}")
        k = k + (0,) * (n - len(k))
    return k


def _coeff(v, weight) -> E.Expr:
    if isinstance(v, str):
        return S.parse_symbol(v, weight)
    return E.as_expr(v)


def _binom(G, B) -> int:
    out = 1
    for g, b in zip(G, B):
        out *= math.comb(g, b)
    return out


def _sub_indices(G):
    import itertools
    return itertools.product(*(range(g + 1) for g in G))


@dataclass(frozen=True, eq=False)
class DiffOp:
    """Coefficient table of a differential operator of order ``m``."""

    m: int
    coeffs: dict
    weight: WeightFunction
    domain: tuple
    n: int = 2
    weighted: bool = False
    g: E.Expr | None = None
    report: dict = field(default_factory=dict, compare=False)

    def coefficient(self, G) -> E.Expr:
        return self.coeffs.get(_key(G, self.n), E.ZERO)

    def table_text(self) -> dict:
        return {",".join(map(str, k)): S.to_text(v) for k, v in sorted(self.coeffs.items())}

    def with_coeffs(self, coeffs: dict, m: int | None = None) -> DiffOp:
        clean = {k: v for k, v in coeffs.items() if v is not E.ZERO}
        return replace(self, coeffs=clean, m=self.m if m is None else m, report={})

    def __add__(self, other: DiffOp) -> DiffOp:
        _compatible(self, other)
        out = dict(self.coeffs)
        for k, v in other.coeffs.items():
            out[k] = E.add(out.get(k, E.ZERO), v)
        return self.with_coeffs(out, max(self.m, other.m))

    def __sub__(self, other: DiffOp) -> DiffOp:
        return self + other.scale(-1.0)

    def scale(self, c) -> DiffOp:
        return self.with_coeffs({k: E.mul(c, v) for k, v in self.coeffs.items()})

    def __matmul__(self, other: DiffOp) -> DiffOp:
        return compose_diffops(self, other)


def _compatible(P: DiffOp, Q: DiffOp):
    if P.n != Q.n or P.weight is not Q.weight:
        raise DiffOpError("operators live on different charts or weights")
    if P.weighted != Q.weighted:
        raise DiffOpError("cannot combine weighted and unweighted tables")


def _domain_env(domain, n, n_r=65, n_theta=8) -> dict:
    r = np.linspace(domain[0], domain[1], n_r)
    env = {"r": r.reshape((-1,) + (1,) * (n - 1))}
    th = np.arange(n_theta) * (2.0 * np.pi / n_theta)
    for i in range(1, n):
        sh = [1] * n
        sh[i] = -1
        env[f"theta{i}"] = th.reshape(sh)
    return env


def make_diffop(m: int, coeffs: dict, weight: WeightFunction, domain=(1.0, 10.0),
                weighted: bool = False, g=None, n: int | None = None,
                validate: bool = True, M_coeff: int = 4, refine: bool = False,
                lattice: S.SymbolLattice | None = None) -> DiffOp:
    """Build and validate an operator from a coefficient table.

    Keys are tuples ``(gamma0, gamma_1, ...)`` or strings ``"g0,g1"``; values
    are trees, numbers or symbol text.  Missing entries are zero.  Validation
    estimates the order-``M_coeff`` bounded-geometry seminorm of every
    coefficient (and its refinement stability when ``refine``); failures
    are reported in ``report`` rather than raised.  A coefficient with a pole
    on the domain raises.
    """
    if m < 0:
        raise DiffOpError("order must be nonnegative")
    if n is None:
        n = max([len(_key(k, None)) for k in coeffs] + [2])
    if n not in (2, 3):
        raise DiffOpError("dimension must be 2 or 3")
    domain = (float(domain[0]), float(domain[1]))
    if not domain[1] > domain[0]:
        raise DiffOpError("empty domain")
    if not weight.contains(np.array(domain)):
        raise DiffOpError("domain leaves the weight's r_domain")
    if weighted and g is None:
        raise DiffOpError("weighted operators need a density g")
    table = {}
    qn = set(S.q_names(n))
    for k, v in coeffs.items():
        G = _key(k, n)
        if sum(G) > m:
            raise DiffOpError(f"multi-index {G} exceeds order {m}")
        a = _coeff(v, weight)
        extra = {c for c in a.free if c not in qn and c not in ("z", "zbar")}
        if extra:
            raise DiffOpError(f"coefficient {G} depends on {sorted(extra)}; only q allowed")
        if a is not E.ZERO:
            table[G] = E.add(table.get(G, E.ZERO), a)
    g_expr = None if g is None else (g.expr if isinstance(g, DensityWeight) else _coeff(g, weight))
    P = DiffOp(m=m, coeffs=table, weight=weight, domain=domain, n=n,
               weighted=weighted, g=g_expr)
    env = _domain_env(domain, n)
    for G, a in table.items():
        vals = E.evaluate(a, env)
        if not np.all(np.isfinite(vals)):
            raise E.SymbolPoleError(f"coefficient {G} has a pole on the domain")
    if validate:
        P.report.update(coefficient_report(P, M_coeff, refine, lattice))
    return P


def coefficient_report(P: DiffOp, M: int = 4, refine: bool = False,
                       lattice: S.SymbolLattice | None = None) -> dict:
    """Bounded-geometry proxy: finite (and optionally stable) order-0 seminorms."""
    if lattice is None:
        lattice = S.SymbolLattice(n=P.n, r_window=P.domain, log10_min=0.0,
                                  log10_max=0.0, n_dirs=2, n_theta=8)
    tag = S.SymbolClassTag(0.0, 0.0, P.weight)
    rows = {}
    ok = True
    for G, a in sorted(P.coeffs.items()):
        key = ",".join(map(str, G))
        try:
            if refine:
                chk = S.refinement_check(S.estimate_seminorm, a, tag, M, lattice)
                rows[key] = chk.to_dict()
                ok &= chk.stable
            else:
                est = S.estimate_seminorm(a, tag, M, lattice)
                rows[key] = {"value": est.value}
                ok &= bool(np.isfinite(est.value))
        except (E.SymbolError, E.SymbolPoleError) as exc:
            rows[key] = {"error": str(exc)}
            ok = False
    return {"coefficients": rows, "bounded_geometry": bool(ok), "M": M,
            "refined": refine}


def multiplication_op(f, weight: WeightFunction, domain=(1.0, 10.0), n: int = 2,
                      weighted: bool = False, g=None) -> DiffOp:
    zero = (0,) * n
    return make_diffop(0, {zero: f}, weight, domain, weighted, g, n, validate=False)


# symbols ---------------------------------------------------------------------

def _monomial(G, weight) -> E.Expr:
    """``rho^gamma0 (lambda^{-1} eta)^gamma``."""
    parts = [E.ipow(E.RHO, G[0])]
    parts += [E.ipow(E.eta(i), G[i]) for i in range(1, len(G))]
    k = sum(G[1:])
    if k:
        parts.append(E.ipow(E.lam(weight), -k))
    return E.mul(*parts)


def principal_symbol(P: DiffOp) -> E.Expr:
    """``sum_{|Gamma| = m} a_Gamma rho^gamma0 (lambda^{-1} eta)^gamma``."""
    return E.add(*[E.mul(a, _monomial(G, P.weight))
                   for G, a in sorted(P.coeffs.items()) if sum(G) == P.m])


def full_symbol(P: DiffOp, table: dict | None = None) -> E.Expr:
    """Kohn-Nirenberg symbol of the table operator (all orders)."""
    table = P.coeffs if table is None else table
    return E.add(*[E.mul(a, _monomial(G, P.weight)) for G, a in sorted(table.items())])


# composition -------------------------------------------------------------------

def _D_multi(f: E.Expr, B) -> E.Expr:
    """``D^B f`` with ``D = -i d``."""
    counts = [("r", B[0])] + [(f"theta{i}", B[i]) for i in range(1, len(B))]
    d = E.diff_multi(f, counts)
    k = sum(B)
    return d if k == 0 or d is E.ZERO else E.mul((-1j) ** k, d)


def compose_diffops(P: DiffOp, Q: DiffOp) -> DiffOp:
    """Table of ``P Q`` (Leibniz expansion)."""
    _compatible(P, Q)
    out = {}
    w = P.weight
    for G, a in P.coeffs.items():
        for D, b in Q.coeffs.items():
            f = E.mul(b, E.ipow(E.lam(w), -sum(D[1:])))
            for B in _sub_indices(G):
                dB = _D_multi(f, B)
                if dB is E.ZERO:
                    continue
                K = tuple(gi - bi + di for gi, bi, di in zip(G, B, D))
                # lambda^{-|gamma|} from P times lambda^{|kappa|} for the new key
                term = E.mul(_binom(G, B), a, dB,
                             E.ipow(E.lam(w), sum(D[1:]) - sum(B[1:])))
                out[K] = E.add(out.get(K, E.ZERO), term)
    return P.with_coeffs(out, P.m + Q.m)


def commutator(P: DiffOp, Q: DiffOp) -> DiffOp:
    return compose_diffops(P, Q) - compose_diffops(Q, P)


def quantized_table(P: DiffOp) -> dict:
    """Table of ``g^{1/4} P g^{-1/4}``, the operator seen by ``Op^g``."""
    if P.weighted or P.g is None or E.is_const(P.g, 1.0):
        return dict(P.coeffs)
    return dict(conjugate_weight(P, P.g, 0.25).coeffs)


def compose_Lk(P: DiffOp, k: int, b: E.Expr, table: dict | None = None) -> E.Expr:
    """``L_k(P) b``: the order-``k`` term of the symbol of ``P Op^g(b)``.

    ``sum_{B <= Gamma, |B| = k} binom(Gamma, B) a_Gamma rho^{gamma0 - beta0}
    (lambda^{-1} eta)^{gamma - beta} (lambda^{-1} D_theta)^beta D_r^beta0 b``.
    """
    if not 0 <= k <= P.m:
        raise DiffOpError(f"k must lie in [0, {P.m}]")
    table = quantized_table(P) if table is None else table
    b = E.as_expr(b)
    w = P.weight
    terms = []
    for G, a in sorted(table.items()):
        for B in _sub_indices(G):
            if sum(B) != k:
                continue
            dB = _D_multi(b, B)
            if dB is E.ZERO:
                continue
            mono = _monomial(tuple(gi - bi for gi, bi in zip(G, B)), w)
            lam_pow = E.ipow(E.lam(w), -sum(B[1:]))
            terms.append(E.mul(_binom(G, B), a, mono, lam_pow, dB))
    return E.add(*terms)


def compose_symbol(P: DiffOp, b: E.Expr, table: dict | None = None) -> E.Expr:
    """``sum_k L_k(P) b``: the exact symbol of ``P Op^g(b)``."""
    table = quantized_table(P) if table is None else table
    return E.add(*[compose_Lk(P, k, b, table) for k in range(P.m + 1)])


def L0_tilde(P: DiffOp, b: E.Expr, table: dict | None = None) -> E.Expr:
    """``L_0(P) b - sigma(P) b``.

    Built from the lower-order coefficients directly, so that it is the zero
    tree whenever the operator is homogeneous.
    """
    table = quantized_table(P) if table is None else table
    b = E.as_expr(b)
    terms = []
    for G, a in sorted(table.items()):
        if sum(G) == P.m:
            top = P.coeffs.get(G, E.ZERO)
            if a is top:
                continue
            a = E.sub(a, top)
            if E.is_const(a, 0.0):
                continue
        terms.append(E.mul(a, _monomial(G, P.weight), b))
    return E.add(*terms)


# weights -----------------------------------------------------------------------

def conjugate_weight(P: DiffOp, g, a: float) -> DiffOp:
    """Table of ``g^a P g^{-a}``.

    ``D^B (g^{-a} u)`` is expanded through ``d (g^{-a} Q) = g^{-a} (dQ - a (d log g) Q)``
    so no fractional powers appear in the result.
    """
    if isinstance(g, DensityWeight):
        g = g.expr
    g = _coeff(g, P.weight)
    if a == 0.0:
        return P.with_coeffs(dict(P.coeffs))
    h = E.log(g)
    dh = [E.differentiate(h, nm) for nm in S.q_names(P.n)]
    cache = {(0,) * P.n: E.ONE}

    def Q(B):
        # g^a D^B g^{-a} = (-i)^{|B|} Q_B
        if B in cache:
            return cache[B]
        i = next(j for j, b in enumerate(B) if b > 0)
        prev = tuple(b - (j == i) for j, b in enumerate(B))
        qp = Q(prev)
        nm = S.q_names(P.n)[i]
        val = E.sub(E.differentiate(qp, nm), E.mul(a, dh[i], qp))
        cache[B] = val
        return val

    out = {}
    w = P.weight
    for G, c in P.coeffs.items():
        for B in _sub_indices(G):
            q = Q(B)
            if q is E.ZERO:
                continue
            K = tuple(gi - bi for gi, bi in zip(G, B))
            k = sum(B)
            term = E.mul(_binom(G, B), c, (-1j) ** k, q,
                         E.ipow(E.lam(w), -sum(B[1:])))
            out[K] = E.add(out.get(K, E.ZERO), term)
    return P.with_coeffs(out)


# application ---------------------------------------------------------------------

def apply_table(table: dict, weight: WeightFunction, u: np.ndarray, grid) -> np.ndarray:
    """Spectral application of a coefficient table to samples on ``grid``."""
    workers = fft_workers()
    uh = sfft.fftn(u, workers=workers)
    penv = grid.p_env()
    qenv = grid.q_env()
    lam = np.asarray(weight.eval(qenv["r"]), dtype=float)
    out = np.zeros(grid.shape, dtype=complex)
    for G, a in sorted(table.items()):
        mult = penv["rho"] ** G[0]
        for i in range(1, grid.n):
            mult = mult * penv[f"eta{i}"] ** G[i]
        du = sfft.ifftn(uh * mult, workers=workers) if sum(G) else u
        coef = np.asarray(E.evaluate(a, qenv), dtype=complex)
        k = sum(G[1:])
        if k:
            coef = coef * lam ** (-k)
        out += coef * du
    return out


def apply_diffop(P: DiffOp, u: GridFunction, params: dict | None = None,
                 check_admissible: bool = True) -> GridFunction:
    """Spectral differentiation of ``u`` per table entry."""
    if check_admissible:
        u.require_admissible()
    grid = u.grid
    table = P.coeffs
    if params:
        table = {k: E.substitute(v, {nm: E.Const(val) for nm, val in
                                     E.bind_params({}, params).items()})
                 for k, v in table.items()}
    if P.weighted:
        gw = DensityWeight(P.g, grid)
        w = apply_table(table, P.weight, u.values * gw.quarter, grid) * gw.inv_quarter
    else:
        w = apply_table(table, P.weight, u.values, grid)
    return GridFunction(w, grid)


# ellipticity ---------------------------------------------------------------------

@dataclass
class EllipticityCertificate:
    z: complex
    C: float
    delta: float
    lattice: dict
    passed: bool
    C_max: float
    refined_C: float | None = None
    stable: bool | None = None

    def to_dict(self) -> dict:
        return {"z": [self.z.real, self.z.imag], "C": self.C, "delta": self.delta,
                "lattice": self.lattice, "pass": self.passed, "C_max": self.C_max,
                "refined_C": self.refined_C, "stable": self.stable}


def _ellipticity_sample(P: DiffOp, z: complex, lattice: S.SymbolLattice, support=None):
    sigma = principal_symbol(P)
    r = lattice.r_values()
    th = lattice.theta_values()
    mom = lattice.momenta()
    lam = np.asarray(P.weight.eval(r), dtype=float)
    env = {"r": r[:, None, None], "rho": mom[None, None, :, 0]}
    for i in range(1, P.n):
        env[f"theta{i}"] = th[None, :, i - 1, None]
        env[f"eta{i}"] = lam[:, None, None] * mom[None, None, :, i]
    s = np.broadcast_to(E.evaluate(sigma, env), (r.size, th.shape[0], mom.shape[0]))
    dist = np.abs(z - s)
    br = np.broadcast_to((1.0 + np.sum(mom * mom, axis=1)) ** (0.5 * P.m), dist.shape)
    with np.errstate(divide="ignore"):
        ratio = np.maximum(br / dist, dist / br)
    if support is not None:
        keep = np.broadcast_to(np.asarray(E.evaluate(support, env)) != 0, dist.shape)
        ratio, dist = ratio[keep], dist[keep]
    return float(np.max(ratio)), float(np.min(dist))


def ellipticity_certificate(P: DiffOp, z: complex, lattice: S.SymbolLattice | None = None,
                            C_max: float = 10.0, refine: bool = True,
                            tolerance: float = 0.10, support=None) -> EllipticityCertificate:
    """Lattice certificate of ``C^{-1} <p>^m <= |z - sigma| <= C <p>^m``.

    ``C`` is the largest of the two ratios over the lattice and ``delta`` the
    smallest distance from ``z`` to the sampled principal symbol.  With
    ``refine`` the doubled lattice is also sampled and ``stable`` records
    whether ``C`` moved by at most ``tolerance``.  With a q-only ``support``
    tree, points where it vanishes are left out.
    """
    z = complex(z)
    if lattice is None:
        lattice = S.SymbolLattice(n=P.n, r_window=P.domain)
    C, delta = _ellipticity_sample(P, z, lattice, support)
    C = max(C, 1.0)
    refined = stable = None
    if refine:
        refined, _ = _ellipticity_sample(P, z, lattice.refine(), support)
        refined = max(refined, 1.0)
        stable = bool(np.isfinite(C) and abs(refined - C) <= tolerance * max(C, refined))
    passed = bool(delta > 0.0 and np.isfinite(C) and C <= C_max and stable is not False)
    return EllipticityCertificate(z, C, delta, lattice.describe(), passed, C_max,
                                  refined, stable)


def diffop_from_config(section: dict, weight: WeightFunction, domain=(1.0, 10.0),
                       g=None, n: int | None = None) -> DiffOp:
    """Build from ``op.coeff."g0,g"`` entries plus ``op.order`` and ``op.weighted``."""
    coeffs = dict(section.get("coeff", {}))
    order = int(section.get("order", max([sum(_key(k, None)) for k in coeffs] + [0])))
    return make_diffop(order, coeffs, weight, domain, bool(section.get("weighted", False)),
                       g, n, validate=bool(section.get("validate", False)))


def diffop_mode_operator(P: DiffOp, grid, params: dict | None = None):
    """``P`` as a mode operator (theta-free coefficients only).

    The blocks act on angular modes of ``g^{1/4} u``, so they are built from
    :func:`quantized_table`.
    """
    from .quantize import ModeOperator, _r_phase, mode_frequencies

    table = quantized_table(P)
    if any(c.startswith("theta") for a in table.values() for c in a.free):
        raise DiffOpError("mode operators need theta-independent coefficients")
    r = grid.r()
    nr = grid.n_r
    Er = _r_phase(grid)
    rho = grid.rho()
    freqs = mode_frequencies(grid)
    lam = np.asarray(P.weight.eval(r), dtype=float)
    env = E.bind_params({"r": r}, params)
    nm = freqs.shape[0]
    blocks = np.zeros((nm, nr, nr), dtype=complex)
    Dr = {}
    for G, a in sorted(table.items()):
        k0 = G[0]
        if k0 not in Dr:
            Dr[k0] = ((Er * rho[None, :] ** k0) @ np.conj(Er).T) / nr if k0 else np.eye(nr)
        coef = np.broadcast_to(np.asarray(E.evaluate(a, env), dtype=complex), (nr,))
        k = sum(G[1:])
        if k:
            coef = coef * lam ** (-k)
        eta_pow = np.prod(freqs ** np.array(G[1:])[None, :], axis=1)
        blocks += eta_pow[:, None, None] * (coef[:, None] * Dr[k0])[None]
    g = None
    if P.g is not None and not E.is_const(P.g, 1.0):
        from .quantize import DensityWeight
        g = DensityWeight(P.g, grid)
    return ModeOperator(blocks, grid, g)
