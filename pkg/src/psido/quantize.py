"""Discrete quantization of symbols and bisymbols on padded periodic grids.

The r axis is a uniform periodic box whose ends are padding: admissible
inputs vanish there, so the periodic seam never sees them.  The angular axes
are uniform on a circle of period ``theta_period`` (``2 pi`` unless a scaled
grid is requested).  The momentum integral becomes the sum over the DFT
frequency lattice, which is exact for band-limited inputs.

All operators act on ``L^2(g^{1/2} dq)``: ``Op^g(a) = g^{-1/4} Op(a) g^{1/4}``.
"""

from __future__ import annotations

import math
import os
import struct
import warnings
from collections.abc import Callable
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.fft as sfft

from . import symbols as S
from .symbols import expr as E


class GridError(ValueError):
    """Invalid grid or grid-function operation."""


class AdmissibilityError(ValueError):
    """Input has non-negligible mass in the padding."""


class SizeGuardError(RuntimeError):
    """Requested quadrature is above the desk-scale size guard."""


BISYMBOL_MAX_POINTS = 2 ** 14
_CHUNK = 2 ** 16  # elements per symbol evaluation chunk (bounds peak memory)


def fft_workers() -> int:
    try:
        return max(1, int(os.environ.get("PSIDO_THREADS", "1")))
    except ValueError:
        return 1


def _is_pow2(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


@dataclass(frozen=True)
class Grid:
    """Tensor grid: ``n_r`` periodic r-samples and ``n_theta`` per angular axis.

    Parameters
    ----------
    n : int
        Dimension, 2 or 3.
    n_r, n_theta : int
        Powers of two.
    r_min, r_max : float
        The periodic r box ``[r_min, r_max)``.
    pad : float
        Fraction of the r box at each end reserved as zero padding.
    theta_period, theta_min : float
        Angular period and origin (``2 pi`` and ``0`` on the standard grid).
    """

    n: int
    n_r: int
    n_theta: int
    r_min: float
    r_max: float
    pad: float = 0.125
    theta_period: float = 2.0 * math.pi
    theta_min: float = 0.0

    def __post_init__(self):
        if self.n not in (2, 3):
            raise GridError("grid dimension must be 2 or 3")
        if not (_is_pow2(self.n_r) and _is_pow2(self.n_theta)):
            raise GridError("n_r and n_theta must be powers of two")
        if not self.r_max > self.r_min:
            raise GridError("need r_max > r_min")
        if not 0.0 < self.pad < 0.5:
            raise GridError("pad must lie in (0, 1/2)")
        if self.pad_points < 8:
            raise GridError("pad * n_r must give at least 8 padding samples")

    # geometry ---------------------------------------------------------
    @property
    def length(self) -> float:
        return self.r_max - self.r_min

    @property
    def h_r(self) -> float:
        return self.length / self.n_r

    @property
    def h_theta(self) -> float:
        return self.theta_period / self.n_theta

    @property
    def pad_points(self) -> int:
        return int(math.floor(self.pad * self.n_r + 1e-9))

    @property
    def shape(self) -> tuple:
        return (self.n_r,) + (self.n_theta,) * (self.n - 1)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def dq(self) -> float:
        return self.h_r * self.h_theta ** (self.n - 1)

    def r(self) -> np.ndarray:
        return self.r_min + self.h_r * np.arange(self.n_r)

    def theta(self) -> np.ndarray:
        return self.theta_min + self.h_theta * np.arange(self.n_theta)

    def rho(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_r, d=self.h_r)

    def eta(self) -> np.ndarray:
        return 2.0 * np.pi * np.fft.fftfreq(self.n_theta, d=self.h_theta)

    @property
    def rho_nyquist(self) -> float:
        return np.pi / self.h_r

    @property
    def eta_nyquist(self) -> float:
        return np.pi / self.h_theta

    def core_window(self) -> tuple:
        p = self.pad_points
        r = self.r()
        return (float(r[p]), float(r[self.n_r - 1 - p]))

    def core_mask(self) -> np.ndarray:
        p = self.pad_points
        m = np.zeros(self.n_r, dtype=bool)
        m[p:self.n_r - p] = True
        return m.reshape((-1,) + (1,) * (self.n - 1)) * np.ones(self.shape, dtype=bool)

    def q_env(self) -> dict:
        """Coordinate arrays broadcastable to ``shape``."""
        env = {"r": self.r().reshape((-1,) + (1,) * (self.n - 1))}
        th = self.theta()
        for i in range(1, self.n):
            sh = [1] * self.n
            sh[i] = -1
            env[f"theta{i}"] = th.reshape(sh)
        return env

    def p_env(self) -> dict:
        """Frequency arrays broadcastable to ``shape`` (FFT ordering)."""
        env = {"rho": self.rho().reshape((-1,) + (1,) * (self.n - 1))}
        et = self.eta()
        for i in range(1, self.n):
            sh = [1] * self.n
            sh[i] = -1
            env[f"eta{i}"] = et.reshape(sh)
        return env

    def q_points(self) -> np.ndarray:
        """All grid points as an array of shape (size, n), row-major order."""
        env = self.q_env()
        cols = [np.broadcast_to(env[k], self.shape).ravel() for k in S.q_names(self.n)]
        return np.stack(cols, axis=1)

    def p_points(self) -> np.ndarray:
        env = self.p_env()
        cols = [np.broadcast_to(env[k], self.shape).ravel() for k in S.p_names(self.n)]
        return np.stack(cols, axis=1)

    def with_theta_period(self, period: float, theta_min: float = 0.0) -> Grid:
        return replace(self, theta_period=float(period), theta_min=float(theta_min))

    def describe(self) -> dict:
        return {"n": self.n, "n_r": self.n_r, "n_theta": self.n_theta,
                "r_min": self.r_min, "r_max": self.r_max, "pad": self.pad,
                "theta_period": self.theta_period, "theta_min": self.theta_min}


def grid_from_config(section: dict) -> Grid:
    return Grid(n=int(section.get("n", 2)), n_r=int(section["n_r"]),
                n_theta=int(section.get("n_theta", 8)),
                r_min=float(section["r_min"]), r_max=float(section["r_max"]),
                pad=float(section.get("pad", 0.125)))


@dataclass
class GridFunction:
    """Complex samples on a grid."""

    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=complex)
        if self.values.shape != self.grid.shape:
            raise GridError(f"values have shape {self.values.shape}, grid {self.grid.shape}")

    def admissible(self, tol: float = 1e-12) -> bool:
        """True when the sup outside the core is at most ``tol`` times the sup."""
        a = np.abs(self.values)
        top = a.max()
        if not np.all(np.isfinite(a)):
            return False
        if top == 0.0:
            return True
        outside = a[~self.grid.core_mask()]
        return bool(outside.size == 0 or outside.max() <= tol * top)

    def require_admissible(self, tol: float = 1e-12) -> None:
        if not np.all(np.isfinite(self.values)):
            raise AdmissibilityError("grid function has non-finite entries")
        if not self.admissible(tol):
            raise AdmissibilityError(
                "input has mass in the padding; periodic wrap-around would corrupt it")

    def norm(self, g: DensityWeight | None = None) -> float:
        return math.sqrt(max(inner(self, self, g).real, 0.0))

    def copy(self) -> GridFunction:
        return GridFunction(self.values.copy(), self.grid)

    def _like(self, other):
        return other.values if isinstance(other, GridFunction) else other

    def __add__(self, other):
        return GridFunction(self.values + self._like(other), self.grid)

    def __sub__(self, other):
        return GridFunction(self.values - self._like(other), self.grid)

    def __mul__(self, other):
        return GridFunction(self.values * self._like(other), self.grid)

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(-self.values, self.grid)


def inner(u: GridFunction, v: GridFunction, g: DensityWeight | None = None) -> complex:
    """``<u, v> = sum u conj(v) g^{1/2} dq``."""
    w = u.values * np.conj(v.values)
    if g is not None:
        w = w * g.sqrt
    return complex(np.sum(w) * u.grid.dq)


class DensityWeight:
    """A positive density ``g(q)`` sampled on a grid with its quarter powers."""

    def __init__(self, g: E.Expr, grid: Grid):
        g = E.as_expr(g)
        if any(not (c in S.q_names(grid.n)) for c in g.free):
            raise GridError("density must depend on q only")
        vals = E.evaluate(g, grid.q_env())
        vals = np.broadcast_to(np.real_if_close(np.asarray(vals, dtype=complex)),
                               grid.shape).astype(float)
        if not np.all(np.isfinite(vals)) or vals.min() <= 0.0:
            raise GridError("density must be positive and finite on the grid")
        self.expr = g
        self.grid = grid
        self.values = vals
        self.quarter = vals ** 0.25
        self.inv_quarter = 1.0 / self.quarter
        self.sqrt = np.sqrt(vals)

    @property
    def is_unit(self) -> bool:
        return E.is_const(self.expr, 1.0)

    def on(self, grid: Grid) -> DensityWeight:
        return self if grid == self.grid else DensityWeight(self.expr, grid)


def unit_density(grid: Grid) -> DensityWeight:
    return DensityWeight(E.ONE, grid)


# band limiting and test inputs --------------------------------------------

def raised_cosine(k: np.ndarray, k_nyq: float, cutoff: float = 2.0 / 3.0,
                  taper: float = 0.5) -> np.ndarray:
    """1 below ``taper * k_nyq``, cosine roll-off to 0 at ``cutoff * k_nyq``."""
    x = np.abs(k) / k_nyq
    lo, hi = taper, cutoff
    out = np.ones_like(x)
    mid = (x > lo) & (x < hi)
    out[mid] = 0.5 * (1.0 + np.cos(np.pi * (x[mid] - lo) / (hi - lo)))
    out[x >= hi] = 0.0
    return out


def band_filter(grid: Grid, cutoff: float = 2.0 / 3.0, taper: float = 0.5) -> np.ndarray:
    """Multiplier on the FFT lattice (shape ``grid.shape``)."""
    f = raised_cosine(grid.rho(), grid.rho_nyquist, cutoff, taper).reshape(
        (-1,) + (1,) * (grid.n - 1))
    fe = raised_cosine(grid.eta(), grid.eta_nyquist, cutoff, taper)
    for i in range(1, grid.n):
        sh = [1] * grid.n
        sh[i] = -1
        f = f * fe.reshape(sh)
    return f


def band_limit(u: GridFunction, cutoff: float = 2.0 / 3.0, taper: float = 0.5) -> GridFunction:
    w = fft_workers()
    uh = sfft.fftn(u.values, workers=w)
    return GridFunction(sfft.ifftn(uh * band_filter(u.grid, cutoff, taper), workers=w), u.grid)


def core_envelope(grid: Grid, margin: float | None = None, scale: float | None = None) -> E.Expr:
    """Erf plateau that is 1 well inside the core and below 1e-13 in the pad."""
    lo, hi = grid.core_window()
    if scale is None:
        scale = min(max(1.5 * grid.h_r, 0.02 * grid.length), (hi - lo) / 14.0)
    if margin is None:
        margin = 5.5 * scale
    a, b = lo + margin, hi - margin
    if a >= b:
        raise GridError("core too small for the requested envelope")
    return S.erf_plateau(E.R, a, b, scale)


def random_bandlimited(grid: Grid, seed: int, cutoff: float = 0.5,
                       envelope: E.Expr | None = None) -> GridFunction:
    """Random smooth admissible input: filtered noise times an erf envelope."""
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape)
    u = band_limit(GridFunction(noise, grid), cutoff=cutoff, taper=0.6 * cutoff)
    env = core_envelope(grid) if envelope is None else envelope
    w = np.broadcast_to(E.evaluate(env, grid.q_env()), grid.shape)
    out = u.values * w
    out /= np.sqrt(np.sum(np.abs(out) ** 2) * grid.dq)
    return GridFunction(out, grid)


# symbol evaluation helpers ---------------------------------------------------

def _eval(a: E.Expr, env: dict, shape, params=None) -> np.ndarray:
    vals = E.evaluate(a, E.bind_params(env, params))
    vals = np.broadcast_to(np.asarray(vals, dtype=complex), shape)
    if not np.all(np.isfinite(vals)):
        raise E.SymbolPoleError("symbol has a pole or overflow on the grid")
    return vals


def _names(a: E.Expr):
    free = a.free
    q = {c for c in free if c == "r" or (c.startswith("theta") and not c.endswith("'"))}
    p = {c for c in free if c == "rho" or c.startswith("eta")}
    qp = {c for c in free if c.endswith("'")}
    return q, p, qp


def _theta_free(a: E.Expr) -> bool:
    return not any(c.startswith("theta") for c in a.free)


def _theta_axes(grid: Grid) -> tuple:
    return tuple(range(1, grid.n))


def _check_input(u: GridFunction, check_admissible: bool):
    if check_admissible:
        u.require_admissible()


def _weights(g: DensityWeight | None, grid: Grid):
    if g is None or g.is_unit:
        return None
    return g.on(grid)


# t = 1 quantization ------------------------------------------------------------

def apply_op(a: E.Expr, u: GridFunction, t: float = 1.0, g: DensityWeight | None = None,
             params: dict | None = None, check_admissible: bool = True) -> GridFunction:
    """``Op^{g,t}(a) u``."""
    a = E.as_expr(a)
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    if t < 1.0:
        return apply_bisymbol_op(S.freeze_bisymbol(a, t, u.grid.n), u, g, params,
                                 check_admissible)
    _, _, qp = _names(a)
    if qp:
        raise E.SymbolError("t = 1 quantization takes a symbol without q' coordinates")
    _check_input(u, check_admissible)
    grid = u.grid
    gw = _weights(g, grid)
    v = u.values if gw is None else u.values * gw.quarter
    w = _apply_kn(a, v, grid, params)
    if gw is not None:
        w = w * gw.inv_quarter
    return GridFunction(w, grid)


def _apply_kn(a: E.Expr, v: np.ndarray, grid: Grid, params) -> np.ndarray:
    """Kohn-Nirenberg sum ``(1/N) sum_p a(q,p) v^(p) e^{i p (q - q0)}``."""
    q, p, _ = _names(a)
    workers = fft_workers()
    if not p:
        return _eval(a, grid.q_env(), grid.shape, params) * v
    if not q:
        vh = sfft.fftn(v, workers=workers)
        return sfft.ifftn(_eval(a, grid.p_env(), grid.shape, params) * vh, workers=workers)
    if _theta_free(a):
        return _apply_kn_modes(a, v, grid, params)
    return _apply_kn_general(a, v, grid, params)


def _r_phase(grid: Grid) -> np.ndarray:
    """``E[r, rho] = exp(i rho (r - r_min))``."""
    x = grid.r() - grid.r_min
    return np.exp(1j * np.outer(x, grid.rho()))


def _mode_env(grid: Grid, eta_idx: np.ndarray) -> dict:
    """Angular frequencies for a flat list of mode indices (row-major)."""
    et = grid.eta()
    idx = np.unravel_index(eta_idx, (grid.n_theta,) * (grid.n - 1))
    return {f"eta{i + 1}": et[idx[i]] for i in range(grid.n - 1)}


def _apply_kn_modes(a, v, grid, params):
    workers = fft_workers()
    axes = _theta_axes(grid)
    vt = sfft.fftn(v, axes=axes, workers=workers) if axes else v
    nm = grid.n_theta ** (grid.n - 1)
    vt = vt.reshape(grid.n_r, nm)
    vh = sfft.fft(vt, axis=0, workers=workers)
    Er = _r_phase(grid)
    out = np.empty_like(vt)
    chunk = max(1, _CHUNK // (grid.n_r * grid.n_r))
    r = grid.r()[:, None, None]
    rho = grid.rho()[None, :, None]
    for s in range(0, nm, chunk):
        idx = np.arange(s, min(nm, s + chunk))
        env = {"r": r, "rho": rho}
        for k, val in _mode_env(grid, idx).items():
            env[k] = val[None, None, :]
        A = _eval(a, env, (grid.n_r, grid.n_r, idx.size), params)
        out[:, idx] = np.einsum("rpm,rp,pm->rm", A, Er, vh[:, idx]) / grid.n_r
    out = out.reshape(grid.shape)
    return sfft.ifftn(out, axes=axes, workers=workers) if axes else out


def _apply_kn_general(a, v, grid, params):
    workers = fft_workers()
    N = grid.size
    vh = sfft.fftn(v, workers=workers).ravel()
    qpts = grid.q_points()
    ppts = grid.p_points()
    origin = np.array([grid.r_min] + [grid.theta_min] * (grid.n - 1))
    qn, pn = S.q_names(grid.n), S.p_names(grid.n)
    out = np.empty(N, dtype=complex)
    chunk = max(1, _CHUNK // N)
    for s in range(0, N, chunk):
        sl = slice(s, min(N, s + chunk))
        qc = qpts[sl]
        env = {nm: qc[:, i][:, None] for i, nm in enumerate(qn)}
        env.update({nm: ppts[:, i][None, :] for i, nm in enumerate(pn)})
        A = _eval(a, env, (qc.shape[0], N), params)
        phase = np.exp(1j * ((qc - origin) @ ppts.T))
        out[sl] = (A * phase) @ vh / N
    return out.reshape(grid.shape)


# bisymbol quantization -----------------------------------------------------------

def split_factors(a: E.Expr):
    """Split ``a = left(q) * rest * right(q')`` at the top-level product."""
    factors = a.args if isinstance(a, E.Mul) else (a,)
    left, right, rest = [], [], []
    for f in factors:
        q, p, qp = _names(f)
        if not p and not qp:
            left.append(f)
        elif not p and not q:
            right.append(f)
        else:
            rest.append(f)
    return E.mul(*left), E.mul(*rest), E.mul(*right)


def _wrap(x, period):
    return (x + 0.5 * period) % period - 0.5 * period


def apply_bisymbol_op(a: E.Expr, u: GridFunction, g: DensityWeight | None = None,
                      params: dict | None = None, check_admissible: bool = True,
                      size_guard: int = BISYMBOL_MAX_POINTS) -> GridFunction:
    """``Op^g(a) u`` for a bisymbol ``a(q, p, q')``.

    Angular differences ``theta' - theta`` are taken as minimal images on the
    circle (antipodal pairs average both images), which keeps the adjoint
    identity exact on the periodic grid.
    """
    a = E.as_expr(a)
    _check_input(u, check_admissible)
    grid = u.grid
    gw = _weights(g, grid)
    v = u.values if gw is None else u.values * gw.quarter
    left, rest, right = split_factors(a)
    qenv = grid.q_env()
    if right is not E.ONE:
        renv = {k + "'": val for k, val in qenv.items()}
        v = v * _eval(right, renv, grid.shape, params)
    q, p, qp = _names(rest)
    if not qp:
        w = _apply_kn(rest, v, grid, params)
    elif not p:
        # no momentum dependence: the kernel is diagonal, evaluate on q' = q
        env = dict(qenv)
        env.update({k + "'": val for k, val in qenv.items()})
        w = _eval(rest, env, grid.shape, params) * v
    else:
        if grid.size > size_guard:
            raise SizeGuardError(
                f"bisymbol quadrature limited to {size_guard} grid points, got {grid.size}")
        if _theta_free(rest):
            w = _apply_bisymbol_modes(rest, v, grid, params)
        else:
            w = _apply_bisymbol_general(rest, v, grid, params)
    if left is not E.ONE:
        w = w * _eval(left, qenv, grid.shape, params)
    if gw is not None:
        w = w * gw.inv_quarter
    return GridFunction(w, grid)


def bisymbol_mode_kernels(a: E.Expr, grid: Grid, params=None) -> np.ndarray:
    """Per-angular-mode r-kernels ``K[m, r, r']`` of a theta-free bisymbol.

    ``K_m(r, r') = (1/N_r) sum_rho a(r, rho, eta_m, r') e^{i rho (r - r')}``.
    """
    if not _theta_free(a):
        raise E.SymbolError("mode kernels need a theta-independent bisymbol")
    nr = grid.n_r
    nm = grid.n_theta ** (grid.n - 1)
    r = grid.r()
    rho = grid.rho()
    phase = np.exp(1j * (r[:, None, None] - r[None, :, None]) * rho[None, None, :])
    K = np.empty((nm, nr, nr), dtype=complex)
    q, p, qp = _names(a)
    env = {"r": r[:, None, None], "r'": r[None, :, None], "rho": rho[None, None, :]}
    if not any(c.startswith("eta") for c in p):
        A = _eval(a, env, (nr, nr, nr), params)
        K[:] = np.einsum("abp,abp->ab", A, phase)[None] / nr
        return K
    for m in range(nm):
        env_m = dict(env)
        env_m.update(_mode_env(grid, np.array([m])))
        env_m = {k: (np.asarray(v).reshape(()) if k.startswith("eta") else v)
                 for k, v in env_m.items()}
        A = _eval(a, env_m, (nr, nr, nr), params)
        K[m] = np.einsum("abp,abp->ab", A, phase) / nr
    return K


def _apply_bisymbol_modes(a, v, grid, params):
    workers = fft_workers()
    axes = _theta_axes(grid)
    nm = grid.n_theta ** (grid.n - 1)
    vt = sfft.fftn(v, axes=axes, workers=workers).reshape(grid.n_r, nm)
    K = bisymbol_mode_kernels(a, grid, params)
    out = np.einsum("mab,bm->am", K, vt).reshape(grid.shape)
    return sfft.ifftn(out, axes=axes, workers=workers)


def _apply_bisymbol_general(a, v, grid, params):
    N = grid.size
    qpts = grid.q_points()
    ppts = grid.p_points()
    qn, pn, qpn = S.q_names(grid.n), S.p_names(grid.n), S.qp_names(grid.n)
    P = grid.theta_period
    vflat = v.ravel()
    out = np.empty(N, dtype=complex)
    chunk = max(1, _CHUNK // (N * N))
    for s in range(0, N, chunk):
        sl = slice(s, min(N, s + chunk))
        qc = qpts[sl]
        c = qc.shape[0]
        env = {nm: qc[:, i][:, None, None] for i, nm in enumerate(qn)}
        env.update({nm: ppts[:, i][None, None, :] for i, nm in enumerate(pn)})
        env["r'"] = qpts[:, 0][None, :, None]
        diff = qpts[None, :, :] - qc[:, None, :]
        anti = np.zeros((c, N), dtype=bool)
        for i in range(1, grid.n):
            d = _wrap(diff[:, :, i], P)
            anti |= np.isclose(np.abs(d), 0.5 * P, rtol=0.0, atol=1e-12 * P)
            env[qpn[i]] = (qc[:, i][:, None] + d)[:, :, None]
        A = _eval(a, env, (c, N, N), params)
        if anti.any():
            env2 = dict(env)
            for i in range(1, grid.n):
                d = _wrap(diff[:, :, i], P)
                shift = np.where(np.isclose(np.abs(d), 0.5 * P, rtol=0.0, atol=1e-12 * P),
                                 P, 0.0)
                env2[qpn[i]] = (qc[:, i][:, None] + d + shift)[:, :, None]
            A2 = _eval(a, env2, (c, N, N), params)
            A = np.where(anti[:, :, None], 0.5 * (A + A2), A)
        dq = qc[:, None, :] - qpts[None, :, :]
        for i in range(1, grid.n):
            dq[:, :, i] = -_wrap(-dq[:, :, i], P)
        phase = np.exp(1j * np.einsum("abk,pk->abp", dq, ppts))
        K = np.einsum("abp,abp->ab", A, phase) / N
        out[sl] = K @ vflat
    return out.reshape(grid.shape)


def apply_semiclassical(a: E.Expr, u: GridFunction, hbar: float, t: float = 1.0,
                        g: DensityWeight | None = None, params: dict | None = None,
                        check_admissible: bool = True) -> GridFunction:
    """``Op^{g,t}(a(q, hbar p)) u``."""
    if not 0.0 < hbar <= 1.0:
        raise ValueError("hbar must lie in (0, 1]")
    return apply_op(S.semiclassical_symbol(a, hbar, u.grid.n), u, t, g, params,
                    check_admissible)


# angular-mode block operators ---------------------------------------------------

class ModeOperator:
    """Operator that is block diagonal in the angular Fourier modes.

    ``blocks[m]`` is the ``n_r x n_r`` matrix acting on the m-th angular
    mode of ``g^{1/4} u`` (``L^2(g^{1/2} dq)`` is then plain ``l^2``, up to the
    unitary angular DFT), so adjoints and norms are those of the blocks.
    """

    def __init__(self, blocks: np.ndarray, grid: Grid, g: DensityWeight | None = None):
        nm = grid.n_theta ** (grid.n - 1)
        blocks = np.asarray(blocks, dtype=complex)
        if blocks.shape != (nm, grid.n_r, grid.n_r):
            raise GridError(f"blocks must have shape {(nm, grid.n_r, grid.n_r)}")
        if g is not None and not g.is_unit and not np.allclose(
                g.values, g.values[(slice(None),) + (slice(0, 1),) * (grid.n - 1)]):
            raise GridError("mode operators need a theta-independent density")
        self.blocks = blocks
        self.grid = grid
        self.g = None if (g is None or g.is_unit) else g.on(grid)

    def _to_modes(self, u: np.ndarray) -> np.ndarray:
        grid = self.grid
        v = u if self.g is None else u * self.g.quarter
        axes = _theta_axes(grid)
        vt = sfft.fftn(v, axes=axes, workers=fft_workers(), norm="ortho") if axes else v
        return vt.reshape(grid.n_r, -1)

    def _from_modes(self, w: np.ndarray) -> np.ndarray:
        grid = self.grid
        axes = _theta_axes(grid)
        w = w.reshape(grid.shape)
        out = sfft.ifftn(w, axes=axes, workers=fft_workers(), norm="ortho") if axes else w
        return out if self.g is None else out * self.g.inv_quarter

    def apply(self, u: GridFunction) -> GridFunction:
        vt = self._to_modes(u.values)
        w = np.einsum("mab,bm->am", self.blocks, vt)
        return GridFunction(self._from_modes(w), self.grid)

    def apply_adjoint(self, u: GridFunction) -> GridFunction:
        vt = self._to_modes(u.values)
        w = np.einsum("mba,bm->am", np.conj(self.blocks), vt)
        return GridFunction(self._from_modes(w), self.grid)

    __call__ = apply

    def adjoint(self) -> ModeOperator:
        return ModeOperator(np.conj(np.transpose(self.blocks, (0, 2, 1))), self.grid, self.g)

    def __matmul__(self, other: ModeOperator) -> ModeOperator:
        return ModeOperator(self.blocks @ other.blocks, self.grid, self.g)

    def __add__(self, other: ModeOperator) -> ModeOperator:
        return ModeOperator(self.blocks + other.blocks, self.grid, self.g)

    def __sub__(self, other: ModeOperator) -> ModeOperator:
        return ModeOperator(self.blocks - other.blocks, self.grid, self.g)

    def scale(self, c: complex) -> ModeOperator:
        return ModeOperator(c * self.blocks, self.grid, self.g)

    def left_multiply(self, f: np.ndarray) -> ModeOperator:
        """Compose with multiplication by an r-profile on the left."""
        return ModeOperator(np.asarray(f)[None, :, None] * self.blocks, self.grid, self.g)

    def right_multiply(self, f: np.ndarray) -> ModeOperator:
        return ModeOperator(self.blocks * np.asarray(f)[None, None, :], self.grid, self.g)

    def norm_exact(self) -> float:
        """Largest singular value over all mode blocks."""
        return float(max(np.linalg.norm(b, 2) for b in self.blocks))

    @staticmethod
    def identity(grid: Grid, g: DensityWeight | None = None) -> ModeOperator:
        nm = grid.n_theta ** (grid.n - 1)
        return ModeOperator(np.broadcast_to(np.eye(grid.n_r), (nm, grid.n_r, grid.n_r)).copy(),
                            grid, g)

    @staticmethod
    def multiplier(grid: Grid, f_r: np.ndarray, g: DensityWeight | None = None
                   ) -> ModeOperator:
        nm = grid.n_theta ** (grid.n - 1)
        return ModeOperator(np.broadcast_to(np.diag(np.asarray(f_r, dtype=complex)),
                                            (nm, grid.n_r, grid.n_r)).copy(), grid, g)


def mode_frequencies(grid: Grid) -> np.ndarray:
    """Angular frequency vectors of the flattened modes, shape (n_modes, n - 1)."""
    nm = grid.n_theta ** (grid.n - 1)
    env = _mode_env(grid, np.arange(nm))
    return np.stack([env[f"eta{i}"] for i in range(1, grid.n)], axis=1)


def symbol_mode_operator(a: E.Expr, grid: Grid, g: DensityWeight | None = None,
                         params=None) -> ModeOperator:
    """``Op^g(a)`` as a mode operator; ``a`` may be a theta-free symbol or bisymbol.

    Symbols at ``t = 1`` cost one evaluation per (r, rho, mode); bisymbols need
    the full (r, r', rho) cube per mode.
    """
    left, rest, right = split_factors(E.as_expr(a))
    for part in (left, rest, right):
        if not _theta_free(part):
            raise E.SymbolError("mode operators need a theta-independent symbol")
    nr = grid.n_r
    nm = grid.n_theta ** (grid.n - 1)
    r = grid.r()
    q, p, qp = _names(rest)
    if not p:
        env = {"r": r, "r'": r}
        diag = _eval(rest, env, (nr,), params) if rest is not E.ONE else np.ones(nr)
        blocks = np.broadcast_to(np.diag(diag), (nm, nr, nr)).astype(complex)
    elif not qp:
        Er = _r_phase(grid)
        blocks = np.empty((nm, nr, nr), dtype=complex)
        env = {"r": r[:, None], "rho": grid.rho()[None, :]}
        eta_dep = any(c.startswith("eta") for c in p)
        A0 = None if eta_dep else _eval(rest, env, (nr, nr), params)
        for m in range(nm):
            if eta_dep:
                env_m = dict(env)
                env_m.update({k: np.asarray(v).reshape(())
                              for k, v in _mode_env(grid, np.array([m])).items()})
                A = _eval(rest, env_m, (nr, nr), params)
            else:
                A = A0
            blocks[m] = ((A * Er) @ np.conj(Er).T) / nr
    else:
        blocks = bisymbol_mode_kernels(rest, grid, params)
    if left is not E.ONE:
        blocks = _eval(left, {"r": r}, (nr,), params)[None, :, None] * blocks
    if right is not E.ONE:
        blocks = blocks * _eval(right, {"r'": r}, (nr,), params)[None, None, :]
    return ModeOperator(blocks, grid, g)


def band_limit_operator(grid: Grid, cutoff: float = 2.0 / 3.0, taper: float = 0.5,
                        g: DensityWeight | None = None) -> ModeOperator:
    """The raised-cosine band-limit projector as a mode operator."""
    nr = grid.n_r
    Er = _r_phase(grid)
    fr = raised_cosine(grid.rho(), grid.rho_nyquist, cutoff, taper)
    base = ((Er * fr[None, :]) @ np.conj(Er).T) / nr
    freqs = mode_frequencies(grid)
    fe = np.prod(raised_cosine(freqs, grid.eta_nyquist, cutoff, taper), axis=1)
    return ModeOperator(fe[:, None, None] * base[None], grid, g)


# operator norms --------------------------------------------------------------------

@dataclass
class NormEstimate:
    value: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list, repr=False)

    def __float__(self):
        return self.value


def _assemble(apply: Callable, grid: Grid, g: DensityWeight | None) -> np.ndarray:
    N = grid.size
    if N > 4096:
        raise SizeGuardError("dense assembly limited to 4096 grid points")
    M = np.empty((N, N), dtype=complex)
    e = np.zeros(N, dtype=complex)
    q = None if g is None or g.is_unit else g.on(grid).quarter.ravel()
    for k in range(N):
        e[:] = 0.0
        e[k] = 1.0 if q is None else 1.0 / q[k]
        col = apply(GridFunction(e.reshape(grid.shape), grid)).values.ravel()
        M[:, k] = col if q is None else col * q
    return M


def operator_norm_estimate(apply: Callable, grid: Grid, iterations: int = 50, seed: int = 0,
                           adjoint: Callable | None = None, g: DensityWeight | None = None,
                           tol: float = 1e-10, start: GridFunction | None = None
                           ) -> NormEstimate:
    """Power iteration on ``A* A`` in ``L^2(g^{1/2} dq)``.

    ``adjoint`` must be the adjoint with respect to that inner product (for a
    quantization: the quantization of the adjoint bisymbol).  Without it the
    operator is assembled densely (small grids only).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if adjoint is None:
        M = _assemble(apply, grid, g)
        q = None if g is None or g.is_unit else g.on(grid).quarter
        MH = M.conj().T

        def adjoint(v: GridFunction) -> GridFunction:
            x = v.values.ravel() if q is None else (v.values * q).ravel()
            y = (MH @ x).reshape(grid.shape)
            return GridFunction(y if q is None else y / q, grid)

    if start is None:
        rng = np.random.default_rng(seed)
        x = GridFunction(rng.standard_normal(grid.shape) + 1j * rng.standard_normal(grid.shape),
                         grid)
    else:
        x = start.copy()
    nx = x.norm(g)
    if nx == 0.0:
        return NormEstimate(0.0, 0, True)
    x = x * (1.0 / nx)
    history = []
    est = 0.0
    converged = False
    for it in range(1, iterations + 1):
        y = apply(x)
        ny = y.norm(g)
        history.append(ny)
        if ny == 0.0:
            return NormEstimate(0.0, it, True, history)
        prev, est = est, ny
        z = adjoint(y)
        nz = z.norm(g)
        if nz == 0.0:
            break
        x = z * (1.0 / nz)
        if it > 1 and abs(est - prev) <= tol * est:
            converged = True
            break
    if not converged:
        warnings.warn("power iteration did not converge; returning best estimate",
                      RuntimeWarning, stacklevel=2)
    return NormEstimate(float(max(history)), len(history), converged, history)


def mode_operator_norm(op: ModeOperator, iterations: int = 50, seed: int = 0,
                       tol: float = 1e-10) -> NormEstimate:
    """Power-iteration norm of a mode operator, vectorized over modes."""
    rng = np.random.default_rng(seed)
    nm, nr, _ = op.blocks.shape
    x = rng.standard_normal((nm, nr)) + 1j * rng.standard_normal((nm, nr))
    x /= np.linalg.norm(x, axis=1, keepdims=True)
    B = op.blocks
    BH = np.conj(np.transpose(B, (0, 2, 1)))
    est = np.zeros(nm)
    history = []
    converged = False
    for it in range(1, iterations + 1):
        y = np.einsum("mab,mb->ma", B, x)
        ny = np.linalg.norm(y, axis=1)
        prev, est = est, ny
        history.append(float(ny.max()))
        z = np.einsum("mab,mb->ma", BH, y)
        nz = np.linalg.norm(z, axis=1, keepdims=True)
        nz[nz == 0.0] = 1.0
        x = z / nz
        if it > 1 and np.all(np.abs(est - prev) <= tol * max(est.max(), 1e-300)):
            converged = True
            break
    return NormEstimate(float(est.max()), len(history), converged, history)


# I/O ---------------------------------------------------------------------------------

MAGIC = b"PSIGRID1"


def write_grid_function(path, u: GridFunction) -> None:
    """Binary format: magic, n, N_r, N_theta per axis (int64), r_min, r_max
    (float64), then row-major complex128 samples; all little-endian."""
    grid = u.grid
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<q", grid.n))
        fh.write(struct.pack("<q", grid.n_r))
        for _ in range(grid.n - 1):
            fh.write(struct.pack("<q", grid.n_theta))
        fh.write(struct.pack("<dd", grid.r_min, grid.r_max))
        fh.write(np.ascontiguousarray(u.values, dtype="<c16").tobytes())


def read_grid_header(fh) -> dict:
    magic = fh.read(8)
    if magic != MAGIC:
        raise GridError("not a PSIGRID1 file")
    (n,) = struct.unpack("<q", fh.read(8))
    if n not in (2, 3):
        raise GridError(f"unsupported dimension {n}")
    (n_r,) = struct.unpack("<q", fh.read(8))
    n_theta = [struct.unpack("<q", fh.read(8))[0] for _ in range(n - 1)]
    r_min, r_max = struct.unpack("<dd", fh.read(16))
    return {"n": n, "n_r": n_r, "n_theta": n_theta, "r_min": r_min, "r_max": r_max}


def read_grid_function(path, pad: float = 0.125) -> GridFunction:
    with open(path, "rb") as fh:
        h = read_grid_header(fh)
        if len(set(h["n_theta"])) > 1:
            raise GridError("grids with unequal angular resolutions are not supported")
        grid = Grid(h["n"], h["n_r"], h["n_theta"][0], h["r_min"], h["r_max"], pad=pad)
        data = np.frombuffer(fh.read(), dtype="<c16")
    if data.size != grid.size:
        raise GridError(f"expected {grid.size} samples, found {data.size}")
    return GridFunction(data.reshape(grid.shape).astype(complex), grid)


def export_csv(path, u: GridFunction) -> None:
    """CSV with one row per grid point: coordinates, re, im."""
    grid = u.grid
    pts = grid.q_points()
    vals = u.values.ravel()
    names = S.q_names(grid.n)
    with open(path, "w") as fh:
        fh.write(",".join(names + ["re", "im"]) + "\n")
        for row, v in zip(pts, vals):
            fh.write(",".join(repr(float(x)) for x in row)
                     + f",{v.real!r},{v.imag!r}\n")
