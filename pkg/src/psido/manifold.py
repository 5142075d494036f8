"""Model manifolds with one end, their Laplacians and global parametrices.

The end ``[1, inf) x S`` carries the metric

    G_00 dr^2 + 2 G_0i lambda dr dtheta_i + G_ij lambda^2 dtheta_i dtheta_j,

i.e. ``G`` is written in the frame ``(dr, lambda dtheta)``; ``G = I`` gives
``dr^2 + lambda^2 dSigma^2``.  Two geometries are supported:

``pure_end``   a single end chart; test functions live in ``r >= 2``.
``two_chart``  the end glued to a disk chart through the conformal radius
               ``s = exp(int dr / lambda)`` (``n = 2``, ``lambda`` linear or
               sinh); the partition is blended on the collar ``1 <= r <= 2``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import symbols as S
from .diffops import (
    DiffOp,
    apply_diffop,
    commutator,
    conjugate_weight,
    diffop_mode_operator,
    ellipticity_certificate,
    make_diffop,
    multiplication_op,
)
from .parametrix import build_parametrix, residual_mode_operator
from .quantize import (
    DensityWeight,
    Grid,
    GridFunction,
    ModeOperator,
    apply_op,
    band_limit_operator,
    inner,
    mode_operator_norm,
    random_bandlimited,
    symbol_mode_operator,
)
from .symbols import expr as E
from .weights import WeightFunction, make_weight


class ManifoldError(ValueError):
    """Invalid model data or a failed precondition."""


class SymmetryError(ManifoldError):
    """Operator failed the symmetry check."""


# metrics -------------------------------------------------------------------------

def _det(G):
    n = len(G)
    if n == 1:
        return G[0][0]
    if n == 2:
        return E.sub(E.mul(G[0][0], G[1][1]), E.mul(G[0][1], G[1][0]))
    terms = []
    for j in range(n):
        minor = [[G[i][k] for k in range(n) if k != j] for i in range(1, n)]
        c = _det(minor)
        terms.append(E.mul((-1.0) ** j, G[0][j], c))
    return E.add(*terms)


def metric_inverse(G):
    """Symbolic inverse by cofactors, and the determinant."""
    n = len(G)
    det = _det(G)
    if n == 1:
        return [[E.div(1.0, det)]], det
    H = [[None] * n for _ in range(n)]
    for i in range(n):
        for j in range(n):
            minor = [[G[a][b] for b in range(n) if b != i] for a in range(n) if a != j]
            H[i][j] = E.div(E.mul((-1.0) ** (i + j), _det(minor)), det)
    return H, det


@dataclass(frozen=True, eq=False)
class EndModel:
    """Metric data on the end.

    ``metric`` is the symmetric matrix ``G`` in the frame ``(dr, lambda
    dtheta)`` and ``g_det = lambda^{2(n-1)} det G`` the density of the
    Riemannian measure in ``(r, theta)``.
    """

    n: int
    weight: WeightFunction
    metric: tuple
    g_det: E.Expr
    r_core: float = 2.0
    report: dict = field(default_factory=dict)


def make_end_model(weight: WeightFunction, n: int = 2, perturbation=None,
                   entries=((0, 1),), r_core: float = 2.0, cond_max: float = 100.0,
                   window=None, validate: bool = True) -> EndModel:
    """``G = I + h`` on the listed (symmetric) entries, ``h`` a q-only tree or text."""
    if n not in (2, 3):
        raise ManifoldError("dimension must be 2 or 3")
    G = [[E.ONE if i == j else E.ZERO for j in range(n)] for i in range(n)]
    if perturbation is not None:
        h = S.parse_symbol(perturbation, weight) if isinstance(perturbation, str) \
            else E.as_expr(perturbation)
        for (i, j) in entries:
            G[i][j] = E.add(G[i][j], h)
            if i != j:
                G[j][i] = E.add(G[j][i], h)
    det = _det(G)
    g_det = E.mul(E.ipow(E.lam(weight), 2 * (n - 1)), det)
    end = EndModel(n, weight, tuple(tuple(row) for row in G), g_det, r_core)
    if validate:
        end.report.update(metric_report(end, cond_max, window))
    return end


def metric_report(end: EndModel, cond_max: float = 100.0, window=None, M: int = 2) -> dict:
    """Positivity and conditioning of ``G`` on samples, plus a bounded-geometry
    proxy (finite order-``M`` seminorms of the entries)."""
    lo, hi = window if window is not None else (end.r_core, end.r_core + 8.0)
    n = end.n
    r = np.linspace(lo, hi, 41)
    th = np.arange(16) * (2.0 * np.pi / 16)
    env = {"r": r[:, None]}
    for i in range(1, n):
        env[f"theta{i}"] = th[None, :]
    vals = np.empty((r.size, th.size, n, n))
    for i in range(n):
        for j in range(n):
            vals[:, :, i, j] = np.real(np.broadcast_to(E.evaluate(end.metric[i][j], env),
                                                       (r.size, th.size)))
    if not np.allclose(vals, np.swapaxes(vals, 2, 3)):
        raise ManifoldError("metric is not symmetric")
    eig = np.linalg.eigvalsh(vals)
    if eig.min() <= 0.0:
        raise ManifoldError("metric is degenerate or indefinite on the samples")
    cond = float(np.max(eig[..., -1] / eig[..., 0]))
    lattice = S.SymbolLattice(n=n, r_window=(lo, hi), log10_min=0.0, log10_max=0.0,
                              n_dirs=2, n_theta=8)
    tag = S.SymbolClassTag(0.0, 0.0, end.weight)
    seminorms = {}
    for i in range(n):
        for j in range(i, n):
            seminorms[f"{i},{j}"] = S.estimate_seminorm(end.metric[i][j], tag, M,
                                                        lattice).value
    ok = bool(cond <= cond_max and all(np.isfinite(v) for v in seminorms.values()))
    return {"min_eigenvalue": float(eig.min()), "condition": cond, "cond_max": cond_max,
            "entry_seminorms": seminorms, "passed": ok}


def _coord_names(n):
    return S.q_names(n)


def laplacian_table(n: int, weight: WeightFunction, G, g_det: E.Expr) -> dict:
    """Coefficient table of ``-Delta_g`` for a metric in the ``(dr, lambda dtheta)`` frame.

    ``-Delta u = g^{mu nu} D_mu D_nu u - i c^nu D_nu u`` with
    ``c^nu = d_mu g^{mu nu} + (1/2) (d_mu log g) g^{mu nu}``.
    """
    H, _ = metric_inverse([list(row) for row in G])
    lam = E.lam(weight)
    inv_lam = E.ipow(lam, -1)
    names = _coord_names(n)

    def ginv(mu, nu):
        f = H[mu][nu]
        k = (mu > 0) + (nu > 0)
        return E.mul(f, E.ipow(inv_lam, k)) if k else f

    logg = E.log(g_det)
    dlog = [E.differentiate(logg, nm) for nm in names]
    table = {}

    def put(key, val):
        table[key] = E.add(table.get(key, E.ZERO), val)

    zero = [0] * n
    for mu in range(n):
        for nu in range(n):
            key = list(zero)
            key[mu] += 1
            key[nu] += 1
            # (lambda^{-1} D_theta) absorbs one inverse weight per angular slot
            put(tuple(key), H[mu][nu])
    for nu in range(n):
        c = E.add(*[E.add(E.differentiate(ginv(mu, nu), names[mu]),
                          E.mul(0.5, dlog[mu], ginv(mu, nu))) for mu in range(n)])
        key = list(zero)
        key[nu] += 1
        val = E.mul(-1j, c)
        if nu > 0:
            val = E.mul(val, lam)
        put(tuple(key), val)
    return {k: v for k, v in table.items() if not E.is_const(v, 0.0)}


def to_weighted_form(P: DiffOp) -> DiffOp:
    """Same operator with its table rewritten for ``g^{-1/4} D g^{1/4}`` derivatives."""
    if P.weighted:
        return P
    if P.g is None:
        raise ManifoldError("weighted form needs a density")
    Q = conjugate_weight(P, P.g, 0.25)
    return make_diffop(Q.m, Q.coeffs, P.weight, P.domain, weighted=True, g=P.g, n=P.n,
                       validate=False)


# charts and manifolds ------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Chart:
    name: str
    operator: DiffOp
    kappa: E.Expr
    grid: Grid
    support: E.Expr | None = None
    lattice: S.SymbolLattice | None = None
    C_max: float = 10.0
    window: E.Expr | None = None


@dataclass(frozen=True, eq=False)
class ModelManifold:
    end: EndModel
    mode: str
    charts: tuple
    collar: tuple = (1.0, 2.0)
    conformal: dict = field(default_factory=dict)

    def chart(self, name: str) -> Chart:
        for c in self.charts:
            if c.name == name:
                return c
        raise KeyError(name)


def conformal_data(weight: WeightFunction) -> dict:
    """Conformal radius ``s(r)`` and ``e^{-2 phi}`` as functions of ``s^2``.

    ``dr^2 + lambda^2 dtheta^2 = e^{2 phi} (dx^2 + dy^2)`` with ``s = |(x, y)|``,
    normalised so that ``e^{2 phi} = 1`` at the origin.
    """
    if weight.kind == "sinh_hyperbolic" and not weight.params:
        # Poincare disk of radius 2: the metric is the identity at the origin
        return {"s": lambda r: 2.0 * np.tanh(0.5 * r),
                "r_of_s": lambda s: 2.0 * np.arctanh(0.5 * s),
                "s2_expr": lambda rr: E.mul(4.0, E.ipow(E.tanh(E.mul(0.5, rr)), 2)),
                "inv_conf": lambda s2: E.ipow(E.sub(1.0, E.mul(0.25, s2)), 2),
                "s_max": 2.0, "kind": "hyperbolic"}
    if weight.kind == "linear_conical" and weight.params in ((), (1.0,), (1.0, 0.0)):
        return {"s": lambda r: r, "r_of_s": lambda s: s,
                "s2_expr": lambda rr: E.ipow(rr, 2),
                "inv_conf": lambda s2: E.ONE, "s_max": math.inf, "kind": "flat"}
    raise ManifoldError("two-chart mode supports lambda = r and lambda = sinh r only")


def _blend(s2, a2, b2, up: bool):
    """Compact smoothstep in ``s^2`` across ``[a2, b2]``."""
    t = E.mul(1.0 / (b2 - a2), E.sub(s2, a2) if up else E.sub(b2, s2))
    return E.prim("smoothstep", t)


def make_model_manifold(end: EndModel, mode: str = "pure_end", grid: Grid | None = None,
                        kappa=None, core_grid: Grid | None = None,
                        collar=(1.0, 2.0)) -> ModelManifold:
    """Assemble charts, Laplacians and the squared partition.

    ``pure_end``: one chart on ``grid``; ``kappa`` (default an erf plateau
    inside the grid core) plays the role of the cutoff and test functions
    are taken where it is 1.
    """
    w = end.weight
    if mode == "pure_end":
        if grid is None:
            grid = Grid(end.n, 512, 8, 0.5, 16.5)
        lo, hi = grid.core_window()
        if kappa is None:
            kappa = S.erf_plateau(E.R, lo + 1.0, hi - 1.0, 0.5)
        P = make_diffop(2, laplacian_table(end.n, w, end.metric, end.g_det), w,
                        (grid.r_min, grid.r_max), g=end.g_det, n=end.n, validate=False)
        chart = Chart("end", P, E.as_expr(kappa), grid)
        return ModelManifold(end, mode, (chart,), collar)
    if mode != "two_chart":
        raise ManifoldError(f"unknown manifold mode {mode!r}")
    if end.n != 2:
        raise ManifoldError("two-chart mode is implemented for n = 2")
    if any(not E.is_const(end.metric[i][j], float(i == j)) for i in range(2) for j in range(2)):
        raise ManifoldError("two-chart mode needs the unperturbed rotational metric")
    conf = conformal_data(w)
    a, b = collar
    a2 = float(conf["s"](a)) ** 2
    b2 = float(conf["s"](b)) ** 2
    # end chart
    if grid is None:
        grid = Grid(2, 256, 16, 0.4, 12.4, pad=0.0625)
    s2_end = conf["s2_expr"](E.R)
    k_end_core = _blend(s2_end, a2, b2, up=False)
    k_end_end = _blend(s2_end, a2, b2, up=True)
    norm_end = E.exp(E.mul(-0.5, E.log(E.add(E.ipow(k_end_core, 2), E.ipow(k_end_end, 2)))))
    P_end = make_diffop(2, laplacian_table(2, w, end.metric, end.g_det), w,
                        (grid.r_min, grid.r_max), g=end.g_det, n=2, validate=False)
    # keeps Op(b) kernels off the periodic seam at the far end of the grid
    far = E.prim("erfstep", E.mul(4.0, E.sub(grid.core_window()[1] - 1.5, E.R)))
    end_chart = Chart("end", P_end, E.mul(k_end_end, norm_end), grid,
                      support=E.mul(k_end_end, norm_end), window=far)
    # disk chart: x plays the role of r, y of theta1, weight 1
    one = make_weight("constant")
    X = 1.25 * math.sqrt(b2)
    if core_grid is None:
        core_grid = Grid(2, 64, 64, -X, X, pad=0.125, theta_period=2 * X, theta_min=-X)
    s2 = E.add(E.ipow(E.R, 2), E.ipow(E.theta(1), 2))
    inv_conf = conf["inv_conf"](s2)
    # -Delta = e^{-2 phi} (D_x^2 + D_y^2); the first-order terms cancel exactly
    core_table = {(2, 0): inv_conf, (0, 2): inv_conf}
    # the density only matters on supp kappa_core; saturate s^2 beyond it so
    # the corners of the box stay away from the hyperbolic boundary circle
    cap = 0.5 * (b2 + conf["s_max"] ** 2) if conf["kind"] == "hyperbolic" else 4.0 * X * X
    eps = 0.02
    s2_sat = E.sub(cap, E.mul(eps, E.log(E.add(1.0, E.exp(E.mul(1.0 / eps,
                                                                 E.sub(cap, s2)))))))
    g_core = E.ipow(conf["inv_conf"](s2_sat), -2)
    P_core = make_diffop(2, core_table, one, (core_grid.r_min, core_grid.r_max),
                         g=g_core, n=2, validate=False)
    k_c_core = _blend(s2, a2, b2, up=False)
    k_c_end = _blend(s2, a2, b2, up=True)
    norm_c = E.exp(E.mul(-0.5, E.log(E.add(E.ipow(k_c_core, 2), E.ipow(k_c_end, 2)))))
    sb = math.sqrt(b2)
    core_lattice = S.SymbolLattice(n=2, r_window=(-sb, sb), theta_window=(-sb, sb),
                                   n_r=17, n_theta=16)
    core_chart = Chart("core", P_core, E.mul(k_c_core, norm_c), core_grid,
                       support=E.mul(k_c_core, norm_c), lattice=core_lattice)
    return ModelManifold(end, mode, (core_chart, end_chart), collar,
                         conformal={"kind": conf["kind"], "s_collar": (math.sqrt(a2), sb)})


def end_model_from_config(section: dict) -> EndModel:
    lam = section.get("lambda", {})
    w = make_weight(lam.get("kind", "sinh_hyperbolic"), lam.get("params", []),
                    lam.get("r_domain", [0.05, 80.0]))
    return make_end_model(w, int(section.get("n", 2)), section.get("perturbation"),
                          [tuple(int(x) for x in e.split(",")) for e in
                           section.get("perturbation_entries", ["0,1"])],
                          float(section.get("r_core", 2.0)))


def assemble_laplacian(M: ModelManifold, certify: bool = True, z: complex = 1j) -> list:
    """Per-chart Laplacian tables; with ``certify`` each must pass an
    ellipticity certificate at ``z`` on its chart window."""
    out = []
    for c in M.charts:
        if certify:
            if c.lattice is not None:
                lat = c.lattice
            else:
                lo, hi = c.grid.core_window()
                lo = max(lo, M.collar[0]) if M.mode == "two_chart" else lo
                lat = S.SymbolLattice(n=c.operator.n, r_window=(lo, hi))
            cert = ellipticity_certificate(c.operator, z, lat, C_max=c.C_max, refine=False,
                                           support=c.support)
            c.operator.report["certificate"] = cert.to_dict()
            if not cert.passed:
                raise ManifoldError(f"ellipticity certificate failed in chart {c.name}")
        out.append(c.operator)
    return out


def partition_residual(M: ModelManifold, samples: int = 401) -> float:
    """``max |sum kappa^2 - 1|`` over end-chart radii (both charts pulled back)."""
    if M.mode == "pure_end":
        return 0.0
    conf = conformal_data(M.end.weight)
    r = np.linspace(0.05, 8.0, samples)
    s = conf["s"](r)
    env_end = {"r": r}
    th = np.linspace(0.0, 2.0 * np.pi, 7)[:, None]
    env_core = {"r": s[None, :] * np.cos(th), "theta1": s[None, :] * np.sin(th)}
    ke = np.broadcast_to(E.evaluate(M.chart("end").kappa, env_end), r.shape)
    kc = np.broadcast_to(E.evaluate(M.chart("core").kappa, env_core), (7, r.size))
    return float(np.max(np.abs(kc ** 2 + ke[None, :] ** 2 - 1.0)))


# global parametrix ---------------------------------------------------------------

@dataclass
class GlobalParametrix:
    manifold: ModelManifold
    z: complex
    N: int
    results: dict

    def chart_fields(self, u_chart: dict) -> dict:
        """Per chart: ``v = Op(b) kappa u``, ``(z - P) v``, ``kappa^2 u`` and ``R u``."""
        out = {}
        for c in self.manifold.charts:
            res = self.results[c.name]
            u = u_chart[c.name]
            g = DensityWeight(c.operator.g, c.grid)
            k = np.broadcast_to(E.evaluate(c.kappa, c.grid.q_env()), c.grid.shape)
            if c.window is not None:
                win = np.broadcast_to(E.evaluate(c.window, c.grid.q_env()), c.grid.shape)
                leak = (u * k * (1.0 - win)).norm() / max(u.norm(), 1e-300)
                if leak > 1e-10:
                    raise ManifoldError(f"test function leaks outside chart {c.name} "
                                        f"(relative mass {leak:.2g})")
            ku = u * k
            v = apply_op(res.sum, ku, 1.0, g, check_admissible=False)
            zpv = v * res.z - apply_diffop(c.operator, v, check_admissible=False)
            Ru = apply_op(res.remainder, ku, 1.0, g, check_admissible=False)
            out[c.name] = {"v": v, "lhs": zpv, "k2u": ku * k, "Ru": Ru}
        return out


def global_parametrix(M: ModelManifold, z: complex, N: int = 0, certify: bool = True
                      ) -> GlobalParametrix:
    """Chartwise parametrices with ``chi = kappa``: ``Q u = sum Op(b) kappa u``."""
    results = {}
    for c in M.charts:
        lat = c.lattice
        if lat is None:
            lo, hi = c.grid.core_window()
            lat = S.SymbolLattice(n=c.operator.n, r_window=(lo, hi))
        if certify:
            cert = ellipticity_certificate(c.operator, z, lat, C_max=c.C_max,
                                           refine=False, support=c.support)
            if not cert.passed:
                raise ManifoldError(f"certificate failed in chart {c.name} at z={z}")
        chi = c.kappa if c.window is None else E.mul(c.kappa, c.window)
        results[c.name] = build_parametrix(c.operator, z, chi, N, certify=False)
    return GlobalParametrix(M, complex(z), N, results)


def _fourier_interpolate(f: GridFunction, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Trigonometric interpolant of grid samples at arbitrary points (direct sums)."""
    grid = f.grid
    fh = np.fft.fft2(f.values) / grid.size
    kx = grid.rho()
    ky = grid.eta()
    ex = np.exp(1j * np.outer(np.ravel(x) - grid.r_min, kx))
    ey = np.exp(1j * np.outer(np.ravel(y) - grid.theta_min, ky))
    return np.einsum("pa,ab,pb->p", ex, fh, ey).reshape(np.shape(x))


def global_identity_residual(gp: GlobalParametrix, u_disk) -> dict:
    """``||(z - P) Q u - u - R u|| / ||u||`` on the manifold.

    ``u_disk(x, y)`` is the test function in disk coordinates (pure-end
    models use ``u_disk(r, theta)`` in the end chart directly).  Each chart's
    fields are transferred to the other chart's samples by trigonometric
    interpolation; the manifold is split at the middle of the collar.
    """
    M = gp.manifold
    if M.mode == "pure_end":
        c = M.charts[0]
        qe = c.grid.q_env()
        u = GridFunction(np.broadcast_to(u_disk(qe["r"], qe["theta1"]), c.grid.shape),
                         c.grid)
        f = gp.chart_fields({"end": u})["end"]
        g = DensityWeight(c.operator.g, c.grid)
        res = f["lhs"] - u - f["Ru"]
        return {"residual": res.norm(g) / u.norm(g),
                "kappa_defect": (f["k2u"] - u).norm(g) / u.norm(g)}
    conf = conformal_data(M.end.weight)
    core = M.chart("core")
    endc = M.chart("end")
    qc = core.grid.q_env()
    xc = np.broadcast_to(qc["r"], core.grid.shape)
    yc = np.broadcast_to(qc["theta1"], core.grid.shape)
    qe = endc.grid.q_env()
    re = np.broadcast_to(qe["r"], endc.grid.shape)
    te = np.broadcast_to(qe["theta1"], endc.grid.shape)
    se = conf["s"](re)
    xe, ye = se * np.cos(te), se * np.sin(te)
    u_core = GridFunction(u_disk(xc, yc), core.grid)
    u_end = GridFunction(u_disk(xe, ye), endc.grid)
    F = gp.chart_fields({"core": u_core, "end": u_end})
    s_mid = float(conf["s"](0.5 * (M.collar[0] + M.collar[1])))
    r_mid = 0.5 * (M.collar[0] + M.collar[1])
    total = {}
    for key in ("lhs", "k2u", "Ru"):
        # on core samples inside s_mid: core field plus end field pulled over
        sc = np.hypot(xc, yc)
        mask_c = sc < s_mid
        rc = conf["r_of_s"](np.minimum(sc, 0.999999 * conf["s_max"]))
        tc = np.arctan2(yc, xc) % (2.0 * np.pi)
        val_c = F["core"][key].values.copy()
        # chart fields vanish off supp kappa, so samples outside the other
        # chart's box take no contribution (and must not wrap around)
        pick = mask_c & (rc > endc.grid.r_min)
        val_c[pick] += _fourier_interpolate(F["end"][key], rc[pick], tc[pick])
        mask_e = re >= r_mid
        val_e = F["end"][key].values.copy()
        pick = mask_e & (np.maximum(np.abs(xe), np.abs(ye)) < core.grid.r_max)
        val_e[pick] += _fourier_interpolate(F["core"][key], xe[pick], ye[pick])
        total[key] = (val_c, mask_c, val_e, mask_e)
    gc = DensityWeight(core.operator.g, core.grid).sqrt
    ge = DensityWeight(endc.operator.g, endc.grid).sqrt

    def norm2(vc, mc, ve, me):
        return (np.sum(np.abs(vc[mc]) ** 2 * gc[mc]) * core.grid.dq
                + np.sum(np.abs(ve[me]) ** 2 * ge[me]) * endc.grid.dq)

    lhs_c, mc, lhs_e, me = total["lhs"]
    res_c = lhs_c - u_core.values - total["Ru"][0]
    res_e = lhs_e - u_end.values - total["Ru"][2]
    k_c = total["k2u"][0] - u_core.values
    k_e = total["k2u"][2] - u_end.values
    nu = norm2(u_core.values, mc, u_end.values, me)
    return {"residual": float(np.sqrt(norm2(res_c, mc, res_e, me) / nu)),
            "kappa_defect": float(np.sqrt(norm2(k_c, mc, k_e, me) / nu))}


def chart_consistency(M: ModelManifold, u_disk) -> float:
    """Relative mismatch on the collar of ``P (kappa_end u)`` computed in both charts.

    The end cutoff keeps the function away from the end chart's radial seam,
    so both spectral evaluations are valid there.
    """
    if M.mode != "two_chart":
        return 0.0
    conf = conformal_data(M.end.weight)
    core = M.chart("core")
    endc = M.chart("end")
    qc = core.grid.q_env()
    xc = np.broadcast_to(qc["r"], core.grid.shape)
    yc = np.broadcast_to(qc["theta1"], core.grid.shape)
    rc = conf["r_of_s"](np.minimum(np.hypot(xc, yc), 0.999999 * conf["s_max"]))
    qe = endc.grid.q_env()
    re = np.broadcast_to(qe["r"], endc.grid.shape)
    te = np.broadcast_to(qe["theta1"], endc.grid.shape)
    se = conf["s"](re)

    def k_end(r, th):
        return np.broadcast_to(E.evaluate(endc.kappa, {"r": r, "theta1": th}), np.shape(r))

    kc = np.where(rc > endc.grid.r_min, k_end(rc, np.arctan2(yc, xc)), 0.0)
    Pc = apply_diffop(core.operator, GridFunction(kc * u_disk(xc, yc), core.grid),
                      check_admissible=False)
    Pe = apply_diffop(endc.operator,
                      GridFunction(k_end(re, te) * u_disk(se * np.cos(te), se * np.sin(te)),
                                   endc.grid), check_admissible=False)
    a, b = M.collar
    mask = (re >= a) & (re <= b)
    from_core = _fourier_interpolate(Pc, (se * np.cos(te))[mask], (se * np.sin(te))[mask])
    scale = np.max(np.abs(Pe.values[mask]))
    return float(np.max(np.abs(from_core - Pe.values[mask])) / scale)


# self-adjointness -----------------------------------------------------------------

def symmetry_residual(P: DiffOp, grid: Grid, seeds=(0, 1, 2, 3, 4)) -> float:
    """``max |<Pu, v> - <u, Pv>| / (||Pu|| ||v|| + ||u|| ||Pv||)`` over random pairs."""
    g = DensityWeight(P.g, grid) if P.g is not None else None
    worst = 0.0
    for s in seeds:
        u = random_bandlimited(grid, 2 * s + 101)
        v = random_bandlimited(grid, 2 * s + 102)
        Pu = apply_diffop(P, u)
        Pv = apply_diffop(P, v)
        lhs = inner(Pu, v, g)
        rhs = inner(u, Pv, g)
        scale = Pu.norm(g) * v.norm(g) + u.norm(g) * Pv.norm(g)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def remainder_norm(P: DiffOp, kappa: E.Expr, y: float, grid: Grid, N: int = 0,
                   method: str = "exact", iterations: int = 300, seed: int = 0) -> dict:
    """``||R(iy) Pi||`` for the pure-end global parametrix ``Op(b) kappa``.

    ``method="exact"`` takes the largest singular value over the angular
    mode blocks; ``"power"`` runs power iteration on the same operator.
    """
    res = build_parametrix(P, 1j * y, kappa, N, certify=False)
    A = residual_mode_operator(P, res, grid, right_cutoff=kappa)
    return {"y": y, **_norm(A, method, iterations, seed)}


def _norm(A: ModeOperator, method: str, iterations: int, seed: int) -> dict:
    if method == "exact":
        return {"norm": A.norm_exact(), "method": "exact"}
    if method != "power":
        raise ManifoldError(f"unknown norm method {method!r}")
    est = mode_operator_norm(A, iterations, seed)
    return {"norm": est.value, "method": "power", "iterations": est.iterations,
            "converged": est.converged}


def commutator_norm(P: DiffOp, delta: float, r0: float, y: float, grid: Grid,
                    kappa: E.Expr, method: str = "exact", iterations: int = 300,
                    seed: int = 0) -> float:
    """``|| [P, f_delta] Op(b_0(iy)) kappa Pi ||`` with ``f_delta(r) = S(1 - delta (r - r0))``."""
    f = E.prim("smoothstep", E.sub(1.0, E.mul(delta, E.sub(E.R, r0))))
    F = multiplication_op(f, P.weight, P.domain, P.n, P.weighted, P.g)
    C = commutator(P, F)
    res = build_parametrix(P, 1j * y, kappa, 0, certify=False)
    g = DensityWeight(P.g, grid) if P.g is not None else None
    B = symbol_mode_operator(res.sum, grid, g)
    Cm = diffop_mode_operator(C, grid)
    k = np.asarray(np.broadcast_to(E.evaluate(kappa, {"r": grid.r()}), (grid.n_r,)),
                   dtype=complex)
    A = ModeOperator(Cm.blocks @ B.blocks, grid, g).right_multiply(k)
    A = A @ band_limit_operator(grid, g=g)
    return _norm(A, method, iterations, seed)["norm"]


def selfadjointness_experiment(M: ModelManifold, y_list=(4.0, 16.0, 64.0), seed: int = 0,
                               deltas=(0.2, 0.1, 0.05), commutator_y: float = 4.0,
                               commutator_grid: Grid | None = None, r0: float | None = None,
                               symmetry_tol: float = 1e-8, method: str = "exact",
                               iterations: int = 300) -> dict:
    """Symmetry, ``||R(iy)||`` against ``y`` and the cutoff-commutator trend."""
    if M.mode != "pure_end":
        raise ManifoldError("the self-adjointness experiment runs on the pure-end model")
    c = M.charts[0]
    P = c.operator
    sym = symmetry_residual(P, c.grid)
    if sym > symmetry_tol:
        raise SymmetryError(f"operator is not symmetric: residual {sym:.3g}")
    Pw = to_weighted_form(P)
    rows = [remainder_norm(Pw, c.kappa, y, c.grid, 0, method, iterations, seed)
            for y in y_list]
    norms = np.array([row["norm"] for row in rows])
    below = [row["y"] for row in rows if row["norm"] < 1.0]
    slope = float(np.polyfit(np.log(list(y_list)), np.log(norms), 1)[0])
    cg = commutator_grid if commutator_grid is not None else Grid(P.n, 512, 8, 0.5, 32.5)
    Pc = to_weighted_form(make_diffop(P.m, P.coeffs, P.weight, (cg.r_min, cg.r_max),
                                      g=P.g, n=P.n, validate=False))
    lo, hi = cg.core_window()
    kap = S.erf_plateau(E.R, lo + 1.5, hi - 1.5, 0.5)
    if r0 is None:
        # start of the plateau, so every transition of f_delta sees kappa = 1
        r0 = lo + 4.5
    comm = [commutator_norm(Pc, d, r0, commutator_y, cg, kap, method, iterations, seed)
            for d in deltas]
    ratios = [comm[i] / comm[i + 1] for i in range(len(comm) - 1)]
    return {"symmetry_residual": sym, "remainder": rows,
            "threshold_y": min(below) if below else None, "decay_exponent": slope,
            "commutator": {"deltas": list(deltas), "norms": comm, "ratios": ratios,
                           "y": commutator_y, "r0": r0}}
