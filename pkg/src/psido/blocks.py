"""Unit-scale blocks ``psi_j Op(a) psi_k``: scaling, norms, decay and aggregation.

A block is conjugated by the angular dilation

    U f(r, theta) = L^{-(n-1)/2} f(r, theta / L),   L = lambda(t j + (1 - t) k),

which turns ``psi_j Op(a) psi_k`` into ``Op(a_jk)`` with

    a_jk(q, p, q') = a(r, theta / L, rho, L eta, r', theta' / L) psi_j(r) psi_k(r').

On the periodic grid ``U`` is an exact relabelling: the samples are kept
and the angular period becomes ``2 pi L`` (so the frequency lattice shrinks
by ``1 / L``).  It is unitary and the conjugation holds to rounding.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import symbols as S
from .quantize import (
    Grid,
    GridFunction,
    ModeOperator,
    NormEstimate,
    apply_bisymbol_op,
    mode_operator_norm,
    operator_norm_estimate,
    split_factors,
    symbol_mode_operator,
)
from .symbols import expr as E
from .weights import WeightFunction


@dataclass(frozen=True)
class Partition1D:
    """Translates ``psi(r - j)`` summing to one, and an enlarged bump ``psi~``.

    ``psi(x) = T(x + 1/2) - T(x - 1/2)`` with ``T`` a smoothstep ramp of
    half-width ``w``, so ``supp psi = [-1/2 - w, 1/2 + w]``.  With
    ``delta = 1/2 - w``, ``psi~`` is 1 on ``supp psi`` and vanishes outside
    ``[-1 + 0.6 delta, 1 - 0.6 delta]``, inside ``(-1 + delta/2, 1 - delta/2)``.
    """

    w: float = 0.25

    def __post_init__(self):
        if not 0.0 < self.w < 0.5:
            raise ValueError("ramp half-width must lie in (0, 1/2)")

    @property
    def delta(self) -> float:
        return 0.5 - self.w

    def _ramp(self, x):
        return E.prim("smoothstep", E.mul(1.0 / (2.0 * self.w), E.add(x, self.w)))

    def psi(self, j: int, coord: str = "r") -> E.Expr:
        x = E.sub(E.Coord(coord), float(j))
        return E.sub(self._ramp(E.add(x, 0.5)), self._ramp(E.sub(x, 0.5)))

    def psi_tilde(self, j: int, coord: str = "r") -> E.Expr:
        d = self.delta
        x = E.sub(E.Coord(coord), float(j))
        return S.smooth_plateau(x, -1.0 + 0.6 * d, 1.0 - 0.6 * d, 0.4 * d)

    def window(self, js, coord: str = "r") -> E.Expr:
        """``sum_{j in js} psi_j``."""
        return E.add(*[self.psi(j, coord) for j in js])

    @property
    def support(self) -> tuple:
        return (-0.5 - self.w, 0.5 + self.w)

    def describe(self) -> dict:
        return {"ramp_half_width": self.w, "delta": self.delta,
                "support": list(self.support)}


DEFAULT_PARTITION = Partition1D()


def scale_factor(weight: WeightFunction, j: int, k: int, t: float) -> float:
    c = t * j + (1.0 - t) * k
    if not weight.contains(c):
        raise E.SymbolError(f"scaling point {c} leaves the weight's r_domain")
    return float(weight.eval(c))


def scale_conjugate(a: E.Expr, j: int, k: int, t: float, weight: WeightFunction,
                    part: Partition1D = DEFAULT_PARTITION, n: int = 2) -> E.Expr:
    """``a(r, theta/L, rho, L eta, r', theta'/L) psi_j(r) psi_k(r')``."""
    L = scale_factor(weight, j, k, t)
    mapping = {}
    if L != 1.0:
        for i in range(1, n):
            mapping[f"theta{i}"] = E.mul(1.0 / L, E.theta(i))
            mapping[f"theta{i}'"] = E.mul(1.0 / L, E.theta(i, primed=True))
            mapping[f"eta{i}"] = E.mul(L, E.eta(i))
    body = E.substitute(E.as_expr(a), mapping) if mapping else E.as_expr(a)
    return E.mul(part.psi(j, "r"), body, part.psi(k, "r'"))


def dilated_grid(grid: Grid, L: float) -> Grid:
    return grid.with_theta_period(grid.theta_period * L, grid.theta_min * L)


def dilate(u: GridFunction, L: float) -> GridFunction:
    """``U u`` for ``U f(theta) = L^{-(n-1)/2} f(theta / L)`` (exact relabelling)."""
    g = dilated_grid(u.grid, L)
    return GridFunction(u.values * L ** (-(u.grid.n - 1) / 2.0), g)


def undilate(v: GridFunction, L: float) -> GridFunction:
    g = dilated_grid(v.grid, 1.0 / L)
    return GridFunction(v.values * L ** ((v.grid.n - 1) / 2.0), g)


def _bisymbol(a: E.Expr, t: float, n: int) -> E.Expr:
    if any(c.endswith("'") for c in a.free):
        return a
    return S.freeze_bisymbol(a, t, n)


def _theta_free(a: E.Expr) -> bool:
    return not any(c.startswith("theta") for c in a.free)


def block_operator(a: E.Expr, j: int, k: int, t: float, weight: WeightFunction, grid: Grid,
                   part: Partition1D = DEFAULT_PARTITION, params=None):
    """The scaled block ``Op(a_jk)`` on the dilated grid.

    Returns a :class:`ModeOperator` for angle-free symbols, otherwise a pair
    of closures ``(apply, adjoint)``.
    """
    L = scale_factor(weight, j, k, t)
    b = scale_conjugate(_bisymbol(E.as_expr(a), t, grid.n), j, k, t, weight, part, grid.n)
    g = dilated_grid(grid, L)
    return bisymbol_operator(b, g, params), g


def bisymbol_operator(b: E.Expr, grid: Grid, params=None):
    """``Op(b)`` on ``grid`` as a :class:`ModeOperator` when ``b`` is angle-free,
    otherwise as ``(apply, adjoint)`` closures."""
    if _theta_free(b):
        return symbol_mode_operator(b, grid, params=params)
    left, rest, right = split_factors(b)
    if _theta_free(rest):
        # angular dependence sits in multipliers: build the mode kernels once
        M = symbol_mode_operator(rest, grid, params=params)
        env = grid.q_env()
        lv = np.broadcast_to(E.evaluate(left, env), grid.shape)
        rv = np.broadcast_to(E.evaluate(right, {k + "'": v for k, v in env.items()}),
                             grid.shape)
        return ((lambda u: M.apply(u * rv) * lv),
                (lambda u: M.apply_adjoint(u * np.conj(lv)) * np.conj(rv)))
    bd = S.adjoint_bisymbol(b, grid.n)
    return ((lambda u: apply_bisymbol_op(b, u, params=params, check_admissible=False)),
            (lambda u: apply_bisymbol_op(bd, u, params=params, check_admissible=False)))


def _norm(op, grid: Grid, iterations: int, seed: int, exact: bool = False) -> NormEstimate:
    if isinstance(op, ModeOperator):
        if exact:
            return NormEstimate(op.norm_exact(), 0, True)
        return mode_operator_norm(op, iterations, seed)
    apply, adjoint = op
    return operator_norm_estimate(apply, grid, iterations, seed, adjoint=adjoint)


def block_norm(a: E.Expr, j: int, k: int, t: float, weight: WeightFunction, grid: Grid,
               seed: int = 0, iterations: int = 50, part: Partition1D = DEFAULT_PARTITION,
               params=None) -> NormEstimate:
    """Power-iteration estimate of ``||psi_j Op(a) psi_k||`` in ``L^2(dq)``."""
    lo, hi = min(j, k) - 2, max(j, k) + 2
    if grid.r_min > lo or grid.r_max < hi:
        raise ValueError(f"grid must cover r in [{lo}, {hi}]")
    if abs(j - k) >= 2 and E.is_const(E.as_expr(a)):
        return NormEstimate(0.0, 0, True)
    op, g = block_operator(a, j, k, t, weight, grid, part, params)
    return _norm(op, g, iterations, seed)


@dataclass
class BlockReport:
    norms: dict
    iterations: dict = field(default_factory=dict)
    converged: dict = field(default_factory=dict)
    decay_fit: dict = field(default_factory=dict)
    cotlar_bound: float | None = None
    descriptors: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["j", "k", "norm", "iterations", "converged"])
            for (j, k) in sorted(self.norms):
                w.writerow([j, k, repr(float(self.norms[(j, k)])),
                            self.iterations.get((j, k), 0),
                            str(bool(self.converged.get((j, k), True))).lower()])

    def summary(self) -> dict:
        return {"decay_fit": self.decay_fit, "cotlar_bound": self.cotlar_bound,
                "max_block": max(self.norms.values()) if self.norms else 0.0,
                "n_blocks": len(self.norms), **self.descriptors}

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)


def block_report(a: E.Expr, pairs, t: float, weight: WeightFunction, grid: Grid,
                 seed: int = 0, iterations: int = 50, part: Partition1D = DEFAULT_PARTITION,
                 params=None) -> BlockReport:
    rep = BlockReport(norms={}, descriptors={"t": t, "weight": weight.label,
                                             "symbol": S.to_text(E.as_expr(a))[:200]})
    for (j, k) in sorted(pairs):
        est = block_norm(a, j, k, t, weight, grid, seed, iterations, part, params)
        rep.norms[(j, k)] = est.value
        rep.iterations[(j, k)] = est.iterations
        rep.converged[(j, k)] = est.converged
    return rep


FLOOR = 1e-14


def fit_decay(norms: dict, min_sep: int = 2, max_sep: int = 6, floor: float = FLOOR) -> dict:
    """Least-squares slope of ``log ||A_jk||`` against ``log <j - k>``.

    For each separation the largest block norm is used.  Norms under
    ``floor`` are dropped; with fewer than two points left the fit reports
    ``decayed_to_floor`` (a pass).
    """
    by_sep = {}
    for (j, k), v in norms.items():
        d = abs(j - k)
        if min_sep <= d <= max_sep:
            by_sep[d] = max(by_sep.get(d, 0.0), float(v))
    seps = sorted(d for d, v in by_sep.items() if v > floor)
    out = {"separations": sorted(by_sep), "max_norm_by_separation":
           {str(d): by_sep[d] for d in sorted(by_sep)}, "floor": floor}
    if len(seps) < 2:
        out.update(slope=None, intercept=None, r2=None, decayed_to_floor=True, passed=True)
        return out
    x = np.log(np.sqrt(1.0 + np.array(seps, dtype=float) ** 2))
    y = np.log(np.array([by_sep[d] for d in seps]))
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid ** 2)) / ss if ss > 0 else 1.0
    out.update(slope=float(slope), intercept=float(intercept), r2=r2,
               decayed_to_floor=False, passed=bool(slope <= -3.0),
               fitted_separations=seps)
    return out


def offdiagonal_decay_fit(a: E.Expr, t: float, weight: WeightFunction, j_range, grid: Grid,
                          seed: int = 0, iterations: int = 50,
                          part: Partition1D = DEFAULT_PARTITION, params=None,
                          separations=range(7)) -> BlockReport:
    """Block norms over ``j_range`` for every separation and the decay fit."""
    js = list(range(j_range[0], j_range[1] + 1))
    if js[-1] - js[0] < 6:
        raise ValueError("j_range must span separations up to 6")
    pairs = [(j, k) for j in js for k in js if abs(j - k) in set(separations)]
    rep = block_report(a, pairs, t, weight, grid, seed, iterations, part, params)
    rep.decay_fit = fit_decay(rep.norms)
    return rep


def cotlar_stein_bound(report) -> float:
    """``max`` of the two adjacency sums of ``sqrt(||A_jk|| ||A_lm||)``."""
    norms = report.norms if isinstance(report, BlockReport) else report
    keys = sorted(norms)
    if not keys:
        return 0.0
    vals = np.array([float(norms[k]) for k in keys])
    J = np.array([k[0] for k in keys])
    K = np.array([k[1] for k in keys])
    root = np.sqrt(np.outer(vals, vals))
    right = (np.abs(K[:, None] - K[None, :]) <= 1)
    left = (np.abs(J[:, None] - J[None, :]) <= 1)
    bound = max(float(np.max(np.sum(root * right, axis=1))),
                float(np.max(np.sum(root * left, axis=1))))
    if isinstance(report, BlockReport):
        report.cotlar_bound = bound
    return bound


def window_norm(a: E.Expr, js, t: float, grid: Grid, seed: int = 0, iterations: int = 50,
                part: Partition1D = DEFAULT_PARTITION, params=None,
                exact: bool = False) -> NormEstimate:
    """``|| (sum psi_j) Op(a) (sum psi_k) ||`` measured directly (unscaled).

    With ``exact`` an angle-free operator is normed by its largest singular
    value instead of power iteration.
    """
    b = _bisymbol(E.as_expr(a), t, grid.n)
    b = E.mul(part.window(js, "r"), b, part.window(js, "r'"))
    return _norm(bisymbol_operator(b, grid, params), grid, iterations, seed, exact)


def symbol_sup(a: E.Expr, lattice: S.SymbolLattice, weight: WeightFunction,
               params=None) -> float:
    """Lattice sup of ``|a|`` (momenta in the weighted variables)."""
    r = lattice.r_values()
    th = lattice.theta_values()
    mom = lattice.momenta()
    lam = np.asarray(weight.eval(r), dtype=float)
    env = {"r": r[:, None, None], "rho": mom[None, None, :, 0]}
    for i in range(1, lattice.n):
        env[f"theta{i}"] = th[None, :, i - 1, None]
        env[f"eta{i}"] = lam[:, None, None] * mom[None, None, :, i]
    return float(np.max(np.abs(E.evaluate(E.as_expr(a), E.bind_params(env, params)))))


def semiclassical_block_scan(a: E.Expr, t: float, weight: WeightFunction, hbars,
                             grid: Grid, j: int | None = None, seed: int = 0,
                             iterations: int = 100, part: Partition1D = DEFAULT_PARTITION,
                             sup_lattice: S.SymbolLattice | None = None,
                             tolerance: float = 0.1) -> dict:
    """Diagonal block norms of ``Op_hbar(a)`` and the fit ``c0 + c1 hbar^{1/2}``."""
    hbars = [float(h) for h in hbars]
    if len(hbars) < 3:
        raise ValueError("need at least three hbar values")
    if any(not 0.0 < h <= 1.0 for h in hbars):
        raise ValueError("hbar values must lie in (0, 1]")
    if j is None:
        j = int(round(0.5 * (grid.r_min + grid.r_max)))
    norms = []
    for h in hbars:
        ah = S.semiclassical_symbol(E.as_expr(a), h, grid.n)
        norms.append(block_norm(ah, j, j, t, weight, grid, seed, iterations, part).value)
    x = np.sqrt(np.array(hbars))
    y = np.array(norms)
    A = np.stack([np.ones_like(x), x], axis=1)
    (c0, c1), *_ = np.linalg.lstsq(A, y, rcond=None)
    fit = A @ np.array([c0, c1])
    scale = float(np.max(np.abs(y))) or 1.0
    residual = float(np.max(np.abs(fit - y))) / scale
    if sup_lattice is None:
        sup_lattice = S.SymbolLattice(n=grid.n, r_window=(j - 1.0, j + 1.0))
    sup_a = symbol_sup(a, sup_lattice, weight)
    return {"hbar": hbars, "norms": [float(v) for v in norms], "c0": float(c0),
            "c1": float(c1), "fit_residual": residual, "sup_a": sup_a,
            "c0_ok": bool(c0 <= sup_a * (1.0 + tolerance)), "j": j}
