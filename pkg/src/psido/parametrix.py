"""Recursive parametrix of ``z - P`` and its remainder.

With ``b_0 = chi / (z - sigma)`` and

    b_j = (z - sigma)^{-1} (L~_0 b_{j-1} + sum_{k<j} L_{j-k} b_k),

the partial sum ``b = b_0 + ... + b_N`` satisfies
``(z - P) Op^g(b) = chi + Op^g(e_{N+1})`` with

    e_{N+1} = -L~_0 b_N - sum_{l >= 1, k <= N, l + k > N} L_l b_k.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import symbols as S
from .diffops import (
    DiffOp,
    L0_tilde,
    apply_diffop,
    compose_Lk,
    ellipticity_certificate,
    principal_symbol,
    quantized_table,
)
from .quantize import (
    DensityWeight,
    GridFunction,
    ModeOperator,
    apply_op,
    band_limit_operator,
    symbol_mode_operator,
)
from .symbols import expr as E

N_MAX = 4


class ParametrixError(ValueError):
    """Parametrix cannot be built for the given data."""


@dataclass
class ParametrixResult:
    z: complex
    N: int
    chi: E.Expr
    terms: list
    sum: E.Expr
    remainder: E.Expr
    delta: float
    certificate: object = None
    class_report: dict = field(default_factory=dict)

    def describe(self) -> dict:
        return {"z": [self.z.real, self.z.imag], "N": self.N, "delta": self.delta,
                "term_sizes": [E.size(t) for t in self.terms],
                "remainder_size": E.size(self.remainder),
                "class_report": self.class_report}


def build_parametrix(P: DiffOp, z: complex, chi, N: int, certify: bool = True,
                     lattice: S.SymbolLattice | None = None, class_M: int | None = None
                     ) -> ParametrixResult:
    """Terms ``b_0 .. b_N`` and remainder ``e_{N+1}`` as symbol trees.

    With ``class_M`` set, every term (and the remainder) gets a seminorm
    estimate of that order with its expected tag, plus a refinement check.
    """
    if not 0 <= N <= N_MAX:
        raise ParametrixError(f"N must lie in [0, {N_MAX}]")
    z = complex(z)
    chi = E.as_expr(chi)
    cert = None
    delta = float("nan")
    if certify:
        cert = ellipticity_certificate(P, z, lattice, refine=False)
        if not cert.passed:
            raise ParametrixError(f"ellipticity certificate failed at z={z}: "
                                  f"C={cert.C:.3g}, delta={cert.delta:.3g}")
        delta = cert.delta
    table = quantized_table(P)
    inv = E.div(1.0, E.sub(z, principal_symbol(P)))
    m = P.m
    L = {}  # (k, j) -> L_k b_j, built lazily and shared by terms and remainder

    def Lk(k, j):
        if (k, j) not in L:
            L[(k, j)] = compose_Lk(P, k, terms[j], table)
        return L[(k, j)]

    def Lt(j):
        if ("t", j) not in L:
            L[("t", j)] = L0_tilde(P, terms[j], table)
        return L[("t", j)]

    terms = [E.mul(chi, inv)]
    for j in range(1, N + 1):
        parts = [Lt(j - 1)] + [Lk(j - k, k) for k in range(max(0, j - m), j)]
        terms.append(E.mul(inv, E.add(*parts)))
    rem = [E.neg(Lt(N))]
    for k in range(N + 1):
        for l in range(max(1, N + 1 - k), m + 1):
            rem.append(E.neg(Lk(l, k)))
    result = ParametrixResult(z=z, N=N, chi=chi, terms=terms, sum=E.add(*terms),
                              remainder=E.add(*rem), delta=delta, certificate=cert)
    if class_M is not None:
        result.class_report = class_report(P, result, class_M, lattice)
    return result


def remainder_symbol(result: ParametrixResult, P: DiffOp | None = None) -> E.Expr:
    return result.remainder


def class_report(P: DiffOp, result: ParametrixResult, M: int = 1,
                 lattice: S.SymbolLattice | None = None) -> dict:
    """Seminorm estimates with tags ``(-m - j, 1)`` and ``(-N - 1, 1)``."""
    if lattice is None:
        lattice = S.SymbolLattice(n=P.n, r_window=P.domain)
    out = {}
    entries = [(f"b{j}", t, -P.m - j) for j, t in enumerate(result.terms)]
    entries.append((f"e{result.N + 1}", result.remainder, -result.N - 1))
    for name, tree, order in entries:
        tag = S.SymbolClassTag(order, 1.0, P.weight)
        chk = S.refinement_check(S.estimate_seminorm, tree, tag, M, lattice)
        out[name] = {"m": order, "sigma": 1.0, "M": M, **chk.to_dict()}
    return out


def support_violation(result: ParametrixResult, lattice: S.SymbolLattice,
                      include_remainder: bool = True) -> float:
    """Largest ``max |b| over {chi = 0} / max |b|`` over the terms."""
    n = lattice.n
    r = lattice.r_values()
    th = lattice.theta_values()
    mom = lattice.momenta()
    env = {"r": r[:, None, None], "rho": mom[None, None, :, 0]}
    for i in range(1, n):
        env[f"theta{i}"] = th[None, :, i - 1, None]
        env[f"eta{i}"] = mom[None, None, :, i]
    shape = (r.size, th.shape[0], mom.shape[0])
    chi = np.broadcast_to(np.abs(E.evaluate(result.chi, env)), shape)
    off = chi == 0.0
    worst = 0.0
    trees = list(result.terms) + ([result.remainder] if include_remainder else [])
    for t in trees:
        v = np.broadcast_to(np.abs(E.evaluate(t, env)), shape)
        top = v.max()
        if top > 0 and off.any():
            worst = max(worst, float(v[off].max() / top))
    return worst


def remainder_bound(P: DiffOp, z: complex, N: int, M: int,
                    lattice: S.SymbolLattice | None = None) -> float:
    """Bound shape with unit constant:
    ``delta^{-(N+1)/m} sum_{l=0}^{M+N+1} sup (<p>^m / |z - sigma|)^{l + 1 - (N+1)/m}``."""
    if lattice is None:
        lattice = S.SymbolLattice(n=P.n, r_window=P.domain)
    z = complex(z)
    sigma = principal_symbol(P)
    r = lattice.r_values()
    th = lattice.theta_values()
    mom = lattice.momenta()
    lam = np.asarray(P.weight.eval(r), dtype=float)
    env = {"r": r[:, None, None], "rho": mom[None, None, :, 0]}
    for i in range(1, P.n):
        env[f"theta{i}"] = th[None, :, i - 1, None]
        env[f"eta{i}"] = lam[:, None, None] * mom[None, None, :, i]
    dist = np.abs(z - np.broadcast_to(E.evaluate(sigma, env), (r.size, th.shape[0],
                                                                 mom.shape[0])))
    delta = float(dist.min())
    if delta <= 0.0:
        raise ParametrixError("z lies on the sampled symbol range")
    br = (1.0 + np.sum(mom * mom, axis=1)) ** (0.5 * P.m)
    sup = float(np.max(br[None, None, :] / dist))
    e = (N + 1) / P.m
    return delta ** (-e) * sum(sup ** (l + 1 - e) for l in range(M + N + 2))


@dataclass
class ResidualReport:
    algebraic: float
    practical: float
    norm_u: float
    refined_algebraic: float | None = None
    grid_too_coarse: bool | None = None

    def to_dict(self) -> dict:
        return dict(algebraic=self.algebraic, practical=self.practical, norm_u=self.norm_u,
                    refined_algebraic=self.refined_algebraic,
                    grid_too_coarse=self.grid_too_coarse)


def _residuals(P, result, u, g, params):
    v = apply_op(result.sum, u, 1.0, g)
    lhs = v * result.z - apply_diffop(P, v, params, check_admissible=False)
    chi = np.broadcast_to(E.evaluate(result.chi, u.grid.q_env()), u.grid.shape)
    practical = lhs - u * chi
    algebraic = practical - apply_op(result.remainder, u, 1.0, g)
    nu = u.norm(g)
    return algebraic.norm(g) / nu, practical.norm(g) / nu, nu


def verify_parametrix(P: DiffOp, result: ParametrixResult, u, g: DensityWeight | None = None,
                      refine_grid=None, params: dict | None = None) -> ResidualReport:
    """Algebraic and practical residuals in the ``g^{1/2} dq`` norm.

    ``u`` is a grid function, or a callable ``grid -> GridFunction`` when a
    doubled grid ``refine_grid`` is given for the coarseness check.
    """
    uu = u(None) if callable(u) and not isinstance(u, GridFunction) else u
    gw = None if g is None else g.on(uu.grid)
    alg, prac, nu = _residuals(P, result, uu, gw, params)
    rep = ResidualReport(alg, prac, nu)
    if refine_grid is not None:
        if not callable(u):
            raise ParametrixError("grid refinement needs u as a callable")
        uf = u(refine_grid)
        gf = None if g is None else g.on(refine_grid)
        alg_f, _, _ = _residuals(P, result, uf, gf, params)
        rep.refined_algebraic = alg_f
        scale = max(alg, alg_f)
        rep.grid_too_coarse = bool(scale > 1e-12 and abs(alg - alg_f) > 0.5 * scale)
    return rep


RESIDUAL_COLUMNS = ("case", "z", "N", "grid", "algebraic", "practical", "bound_shape",
                    "calibrated_C")


def write_residual_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RESIDUAL_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k, "") for k in RESIDUAL_COLUMNS})


def residual_mode_operator(P: DiffOp, result: ParametrixResult, grid, right_cutoff=None,
                           band_limit: bool = True) -> ModeOperator:
    """``((z - P) Op^g(b) - chi) K`` as a mode operator (angle-free data).

    ``K`` is multiplication by ``right_cutoff`` (identity when ``None``);
    with ``right_cutoff = chi`` this is the remainder of the global
    parametrix ``Op^g(b) chi``.  With ``band_limit`` the raised-cosine
    projector is applied on the right, so the norm is taken over smooth
    inputs.
    """
    from .diffops import diffop_mode_operator

    g = None
    if P.g is not None and not E.is_const(P.g, 1.0):
        g = DensityWeight(P.g, grid)
    B = symbol_mode_operator(result.sum, grid, g)
    Pm = diffop_mode_operator(P, grid)
    zB = B.scale(result.z)
    A = zB - ModeOperator(Pm.blocks @ B.blocks, grid, g)
    chi = np.asarray(np.broadcast_to(E.evaluate(result.chi, {"r": grid.r()}), (grid.n_r,)),
                     dtype=complex)
    A = A - ModeOperator.multiplier(grid, chi, g)
    if right_cutoff is not None:
        k = np.asarray(np.broadcast_to(E.evaluate(E.as_expr(right_cutoff), {"r": grid.r()}),
                                       (grid.n_r,)), dtype=complex)
        A = A.right_multiply(k)
    if band_limit:
        A = A @ band_limit_operator(grid, g=g)
    return A
