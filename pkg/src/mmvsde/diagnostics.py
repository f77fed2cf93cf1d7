"""Checks run on simulated ensembles.

Assertion-grade: :func:`check_pair_in_A`. Reporting-grade (statistics
and fits): :func:`cepa_report`, :func:`aldous_modulus`,
:func:`martingale_defect`, :func:`osgood_majorant` and
:func:`fit_majorant`.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.optimize import linprog

from .coeff import apply_marks, modulus
from .errors import UsageError


def _need_full(ens):
    if not ens.full:
        raise UsageError("this diagnostic needs an ensemble recorded with record = full")


def dyadic_blocks(values):
    """Yield ``(level, block_sums)`` for every dyadic block of the leading axis.

    Level ``l`` sums ``values[j 2^l : (j+1) 2^l]`` (the last block may be short).
    """
    cur = np.asarray(values)
    level = 0
    while True:
        yield level, cur
        if cur.shape[0] == 1:
            return
        if cur.shape[0] % 2:
            cur = np.concatenate([cur, np.zeros((1,) + cur.shape[1:])], axis=0)
        cur = cur[0::2] + cur[1::2]
        level += 1


# ------------------------------------------------------------ test functions

@dataclass(frozen=True)
class TestFunction:
    """Radial C^2 test functions with compact support.

    ``bump``: ``exp(1 - 1/(1 - s))`` with ``s = |x - center|^2 / radius^2``.
    ``quadratic_window``: ``|x - center|^2`` times the same bump (radius ``radius``).
    """

    kind: str = "bump"
    center: tuple = (0.0,)
    radius: float = 1.0
    name: str = ""

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        if self.kind not in ("bump", "quadratic_window"):
            raise UsageError(f"unknown test function {self.kind!r}; valid: bump, quadratic_window")
        if not self.radius > 0:
            raise UsageError("test function radius must be > 0")

    def _profile(self, s):
        # returns phi(s), phi'(s), phi''(s) for the radial profile in s
        inside = s < 1.0
        q = np.where(inside, 1.0 - s, 1.0)
        b = np.where(inside, np.exp(1.0 - 1.0 / q), 0.0)
        b1 = -b / q**2
        b2 = b * (1.0 - 2.0 * q) / q**4
        if self.kind == "bump":
            return b, b1, b2
        r2 = self.radius**2
        return r2 * s * b, r2 * (b + s * b1), r2 * (2.0 * b1 + s * b2)

    def _value_profile(self, s):
        inside = s < 1.0
        q = np.where(inside, 1.0 - s, 1.0)
        b = np.exp(1.0 - 1.0 / q)
        b[~inside] = 0.0
        return b if self.kind == "bump" else self.radius**2 * s * b

    def _parts(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        u = x - np.broadcast_to(np.asarray(self.center, dtype=np.float64), (x.shape[1],))
        s = np.sum(u * u, axis=1) / self.radius**2
        return u, s

    def value(self, x):
        _, s = self._parts(x)
        return self._value_profile(s)

    def grad(self, x):
        u, s = self._parts(x)
        _, p1, _ = self._profile(s)
        return (2.0 * p1 / self.radius**2)[:, None] * u

    def hess(self, x):
        u, s = self._parts(x)
        _, p1, p2 = self._profile(s)
        r2 = self.radius**2
        d = u.shape[1]
        return ((2.0 * p1 / r2)[:, None, None] * np.eye(d)
                + (4.0 * p2 / r2**2)[:, None, None] * u[:, :, None] * u[:, None, :])

    def label(self):
        if self.name:
            return self.name
        c = ",".join("%g" % float(v) for v in self.center)
        return f"{self.kind}(c=[{c}],r={float(self.radius):g})"


# -------------------------------------------------------------- A-membership

@dataclass
class PairCheckReport:
    passed: bool
    worst_margin: float
    worst_pair: int
    worst_particle: int
    worst_interval: tuple  # (first step, end step)
    pairs: int
    intervals: int


def pair_margins(ens, x, xstar):
    """Per-step contributions of one graph pair, shape (M, N)."""
    x = np.asarray(x, dtype=np.float64)
    xstar = np.asarray(xstar, dtype=np.float64)
    return ens.xk - ens.dK @ x - ens.xint @ xstar + ens.h * float(x @ xstar)


def check_pair_in_A(ens, xs, xstars, tol=1e-9):
    """Sums of <X_new - x, dK - x* dt> over every dyadic block of steps, for each pair and particle."""
    _need_full(ens)
    xs = np.atleast_2d(xs)
    xstars = np.atleast_2d(xstars)
    worst = (np.inf, -1, -1, (0, 0))
    m = ens.dK.shape[0]
    count = 0
    for j, (x, xs_) in enumerate(zip(xs, xstars)):
        for level, sums in dyadic_blocks(pair_margins(ens, x, xs_)):
            count += sums.shape[0] if j == 0 else 0
            flat = int(np.argmin(sums))
            blk, part = np.unravel_index(flat, sums.shape)
            val = float(sums[blk, part])
            if val < worst[0]:
                size = 1 << level
                worst = (val, j, int(part), (int(blk * size), int(min((blk + 1) * size, m))))
    return PairCheckReport(bool(worst[0] >= -tol), worst[0], worst[1], worst[2], worst[3], xs.shape[0], count)


def flip_increment(ens, step=None, particle=None):
    """Copy of ``ens`` with the sign of one constraint increment flipped (adversarial mutation).

    Defaults to the largest increment in the ensemble.
    """
    import copy

    _need_full(ens)
    out = copy.copy(ens)
    out.dK = ens.dK.copy()
    out.xk = ens.xk.copy()
    if step is None or particle is None:
        norms = np.sum(ens.dK**2, axis=2)
        step, particle = np.unravel_index(int(np.argmax(norms)), norms.shape)
    out.dK[step, particle] *= -1.0
    out.xk[step, particle] *= -1.0
    return out


# -------------------------------------------------------------------- Cepa

@dataclass
class CepaReport:
    kappa1: float
    kappa2: float
    kappa3: float
    method: str
    lhs: np.ndarray  # int <X - a0, dK> per (block, particle)
    variation: np.ndarray  # ||K|| over the block
    distance_integral: np.ndarray  # int |X - a0| dr over the block
    duration: np.ndarray


def cepa_report(ens, a0, operator=None, max_rows=20000):
    """Quantities of the Cépa inequality on every dyadic block, with fitted constants.

    Fit: first try ``kappa2 = kappa3 = 0`` and ``kappa1 = min lhs / variation``;
    if that is not positive, solve a small LP maximizing
    ``kappa1 - kappa2 - kappa3`` with ``kappa1 <= 1`` over (at most
    ``max_rows``, evenly strided) samples.
    """
    _need_full(ens)
    a0 = np.atleast_1d(np.asarray(a0, dtype=np.float64))
    if operator is not None and operator.kind != "zero":
        if not operator.domain.boundary_distance(a0) > 0:
            raise UsageError("a0 must lie strictly inside the domain")
    lhs_step = ens.xk - ens.dK @ a0
    dist_step = ens.h * np.linalg.norm(ens.X[1:] - a0, axis=2)
    cols = {"lhs": [], "var": [], "dist": [], "dt": []}
    for (lvl, l_), (_, v_), (_, d_) in zip(dyadic_blocks(lhs_step), dyadic_blocks(ens.dtv),
                                          dyadic_blocks(dist_step)):
        m = ens.dK.shape[0]
        size = 1 << lvl
        starts = np.arange(l_.shape[0]) * size
        dur = (np.minimum(starts + size, m) - starts) * ens.h
        cols["lhs"].append(l_.ravel())
        cols["var"].append(v_.ravel())
        cols["dist"].append(d_.ravel())
        cols["dt"].append(np.repeat(dur, l_.shape[1]))
    L, V, D, T = (np.concatenate(cols[k]) for k in ("lhs", "var", "dist", "dt"))
    pos = V > 0
    if not np.any(pos):
        return CepaReport(1.0, 0.0, 0.0, "trivial", L, V, D, T)
    k1 = float(np.min(L[pos] / V[pos]))
    if k1 > 0:
        return CepaReport(k1, 0.0, 0.0, "ratio", L, V, D, T)
    stride = max(1, L.size // max_rows)
    Ls, Vs, Ds, Ts = L[::stride], V[::stride], D[::stride], T[::stride]
    res = linprog(c=[-1.0, 1.0, 1.0], A_ub=np.stack([Vs, -Ds, -Ts], axis=1), b_ub=Ls,
                  bounds=[(0, 1), (0, None), (0, None)], method="highs")
    if not res.success:
        return CepaReport(float("nan"), float("nan"), float("nan"), "lp_failed", L, V, D, T)
    k1, k2, k3 = (float(v) for v in res.x)
    return CepaReport(k1, k2, k3, "lp", L, V, D, T)


# ------------------------------------------------------------------ Aldous

@dataclass
class AldousReport:
    deltas: list
    modulus: list  # max over time pairs with lag <= delta of P(|X_t' - X_t| > rho)
    rho: float
    levels: list  # a ladder
    tail: list  # P(sup_t |X_t| >= a)


def aldous_modulus(ens, deltas, rho, time_points=101, ladder=None):
    """Deterministic-time relaxation of the Aldous criterion plus a uniform-boundedness tail table.

    Time pairs come from ``time_points`` evenly spaced grid indices; the
    set of admissible pairs grows with ``delta`` so the estimate is
    monotone in ``delta`` by construction.
    """
    _need_full(ens)
    deltas = [float(v) for v in deltas]
    if any(not (0 < v <= 1) for v in deltas):
        raise UsageError("deltas must lie in (0, 1]")
    m = ens.X.shape[0] - 1
    idx = np.unique(np.round(np.linspace(0, m, min(time_points, m + 1))).astype(int))
    xs = ens.X[idx]
    ts = ens.grid[idx]
    dt = ts[1] - ts[0] if idx.size > 1 else 1.0
    by_lag = [0.0]
    for lag in range(1, idx.size):
        inc = np.linalg.norm(xs[lag:] - xs[:-lag], axis=2)
        by_lag.append(float(np.max(np.mean(inc > rho, axis=1))))
    by_lag = np.maximum.accumulate(np.asarray(by_lag))
    mod = []
    for delta in deltas:
        lag = min(int(np.floor(delta / dt + 1e-9)), idx.size - 1)
        mod.append(float(by_lag[lag]))
    sup = np.sqrt(np.maximum(ens.sup_sq, np.max(np.sum(ens.X**2, axis=2), axis=0)))
    if ladder is None:
        base = np.sqrt(1.0 + np.mean(np.sum(ens.x0**2, axis=1)))
        ladder = [base * c for c in (1, 2, 3, 5, 10)]
    tail = [float(np.mean(sup >= a)) for a in ladder]
    return AldousReport(deltas, mod, float(rho), [float(a) for a in ladder], tail)


# -------------------------------------------------------------- martingales

GAMMA_CATALOG = ("constant", "clip", "clip_half", "tanh")


def gamma_values(ens, name, s_idx):
    """Bounded functionals of the path up to grid index ``s_idx``."""
    if name == "constant":
        return np.ones(ens.particles)
    if name == "clip":
        return np.clip(ens.X[s_idx][:, 0], -1.0, 1.0)
    if name == "clip_half":
        return np.clip(ens.X[s_idx // 2][:, 0], -1.0, 1.0)
    if name == "tanh":
        return np.tanh(np.sum(ens.X[s_idx], axis=1))
    raise UsageError(f"unknown gamma functional {name!r}; valid: {', '.join(GAMMA_CATALOG)}")


def _jump_term(f, kernel, levy, x, ybar, fx, g, hs, nodes, wts, generator_form, chunk=2_000_000):
    """``sum_z w_z [f(x + G) - f(x) - <grad f, G>]`` (or the Hessian form), vectorized over node blocks."""
    n, d = x.shape
    out = np.zeros(n)
    if not nodes.shape[0]:
        return out
    amp = kernel.jump_amplitude(x, ybar)
    step = max(1, chunk // max(n * d, 1))
    for lo in range(0, nodes.shape[0], step):
        z, w = nodes[lo:lo + step], wts[lo:lo + step]
        G = apply_marks(amp[:, None, :], z[None, :, :])  # (n, q, d)
        gG = np.einsum("ni,nqi->nq", g, G)
        if generator_form == "compensator":
            fG = f.value((x[:, None, :] + G).reshape(-1, d)).reshape(n, -1)
            out += (fG - fx[:, None] - gG) @ w
        else:
            out += 0.5 * np.einsum("nqi,nij,nqj->nq", G, hs, G) @ w
        if not levy.compensated:
            out += gG @ w
    return out


def martingale_increments(ens, f, kernel, levy, generator_form="compensator"):
    """Per-step increments of the discretized martingale functional, shape (M, N).

    f(X_{k+1}) - f(X_k) + <grad f(X_{k+1}), dK_k> - L f(X_k) h - jump term h,
    with the law snapshot used by the scheme at step k.
    """
    _need_full(ens)
    if generator_form not in ("paper", "compensator"):
        raise UsageError("generator_form must be paper or compensator")
    m, n, d = ens.dK.shape
    h = ens.h
    out = np.empty((m, n))
    nodes, wts = levy.quadrature() if levy.enabled else (None, None)
    fx = f.value(ens.X[0])
    for k in range(m):
        x, xn, ybar = ens.X[k], ens.X[k + 1], ens.ybar[k]
        fn = f.value(xn)
        g = f.grad(x)
        hs = f.hess(x)
        b = kernel.drift_field(x, ybar)
        sig = kernel.diffusion_field(x, ybar)
        gen = np.sum(b * g, axis=1) + 0.5 * np.einsum("nij,nik,njk->n", sig, sig, hs)
        jump = np.zeros(n) if nodes is None else _jump_term(f, kernel, levy, x, ybar, fx, g, hs, nodes, wts,
                                                            generator_form)
        kterm = np.sum(f.grad(xn) * ens.dK[k], axis=1)
        out[k] = fn - fx + kterm - (gen + jump) * h
        fx = fn
    return out


@dataclass
class DefectTable:
    rows: list = field(default_factory=list)  # dicts: f, s, t, gamma, defect, se

    def excess(self, h, c=0.0):
        """max over rows of |defect| - 3 SE - c h."""
        return max(abs(r["defect"]) - 3.0 * r["se"] - c * h for r in self.rows)


def martingale_defect(ens, fns, kernel, levy, time_pairs, gammas=GAMMA_CATALOG, generator_form="compensator"):
    """``E[(M_t - M_s) Gamma]`` with Monte Carlo standard errors per (f, s, t, Gamma)."""
    if not isinstance(fns, (list, tuple)):
        fns = [fns]
    grid = ens.grid
    table = DefectTable()
    for f in fns:
        inc = martingale_increments(ens, f, kernel, levy, generator_form)
        path = np.zeros((grid.size, ens.particles))
        np.cumsum(inc, axis=0, out=path[1:])
        for s, t in time_pairs:
            si = int(np.argmin(np.abs(grid - s)))
            ti = int(np.argmin(np.abs(grid - t)))
            if not si < ti:
                raise UsageError("time pairs need s < t on the grid")
            dm = path[ti] - path[si]
            for gname in gammas:
                v = dm * gamma_values(ens, gname, si)
                table.rows.append({"f": f.label(), "s": float(grid[si]), "t": float(grid[ti]), "gamma": gname,
                                   "defect": float(v.mean()),
                                   "se": float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0})
    return table


def fit_discretization_constant(table, h):
    """Smallest ``c >= 0`` with every ``|defect| <= 3 SE + c h``."""
    return max(0.0, table.excess(h, 0.0) / h)


# ---------------------------------------------------------------- Osgood

PSI_CATALOG = ("linear", "linear_plus_log")


def psi(psi_id, u):
    u = np.asarray(u, dtype=np.float64)
    if psi_id == "linear":
        return u
    if psi_id == "linear_plus_log":
        return u + modulus("log_osgood", np.maximum(u, 0.0))
    raise UsageError(f"unknown psi {psi_id!r}; valid: {', '.join(PSI_CATALOG)}")


def osgood_majorant(psi_id, C, y0, T=1.0, t_eval=None):
    """Solve ``y' = C psi(y)``, ``y(0) = y0`` on ``[0, T]``; returns ``(t, y)``."""
    if C < 0 or y0 < 0:
        raise UsageError("C and y0 must be nonnegative")
    psi(psi_id, 0.0)
    t_eval = np.linspace(0.0, T, 101) if t_eval is None else np.asarray(t_eval, dtype=np.float64)
    if y0 == 0 or C == 0:
        return t_eval, np.full(t_eval.shape, float(y0))
    sol = solve_ivp(lambda t, y: C * psi(psi_id, y), (0.0, float(t_eval[-1])), [float(y0)], method="DOP853",
                    t_eval=t_eval, rtol=1e-13, atol=1e-300)
    if not sol.success:
        raise RuntimeError(sol.message)
    return sol.t, sol.y[0]


@dataclass
class MajorantFit:
    C: float
    y0: float
    t: np.ndarray
    majorant: np.ndarray
    below: bool


def fit_majorant(t, e, psi_id="linear_plus_log", y0=None):
    """Fit ``C`` so that ``e(t) <= y0 + C int_0^t psi(e)`` on the grid, then integrate the majorant.

    By the Bihari comparison the solution of ``y' = C psi(y)``, ``y(0) = y0``
    then dominates ``e``. ``y0`` defaults to half of ``max e``.
    """
    t = np.asarray(t, dtype=np.float64)
    e = np.asarray(e, dtype=np.float64)
    if y0 is None:
        y0 = 0.5 * float(np.max(e))
    if y0 <= 0:
        return MajorantFit(0.0, 0.0, t, np.zeros_like(t), bool(np.all(e <= 0)))
    pe = psi(psi_id, e)
    integral = np.concatenate([[0.0], np.cumsum(0.5 * (pe[1:] + pe[:-1]) * np.diff(t))])
    need = e - y0
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(need > 0, need / integral, 0.0)
    C = float(np.max(ratios)) if ratios.size else 0.0
    _, y = osgood_majorant(psi_id, C, y0, T=t[-1], t_eval=t)
    below = bool(np.all(e <= y * (1 + 1e-9) + 1e-300))
    return MajorantFit(C, float(y0), t, y, below)
