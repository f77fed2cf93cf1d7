"""Resolvent Euler scheme with jump-adapted substeps, Picard iteration, cascades and coupled runs.

One base step from ``t_k`` to ``t_{k+1}`` splits at the jump times that
fall inside it. Each continuous piece of length ``delta`` does

    Y     = X + (b[X, mu] - comp[X, mu]) delta + sigma[X, mu] dW
    X_new = (I + delta A)^{-1} Y,      dK = Y - X_new

and each jump adds ``G[X_-, mu, z]`` to the state. The law ``mu`` is frozen
at the left end of the base step. Because every catalog kernel depends on
the law only through its mean, the snapshot is stored as a mean vector.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .coeff import MollifierConfig, mollify
from .errors import ConfigurationError, DomainEscapeError, InvalidInputError, ScenarioError, UsageError
from .measure import EmpiricalMeasure, wasserstein2
from .monotone import BOUNDARY_TOL
from .noise import NoiseEnsemble, compensator_field, uniform_grid
from .rng import Channel, normals, uniforms

log = logging.getLogger(__name__)

FULL_RECORD_LIMIT = 2 * 1024**3  # bytes


@dataclass(frozen=True, eq=False)
class InitialLaw:
    """``point``, ``uniform_box`` (lower/upper) or ``gaussian`` (mean/std, projected onto the domain)."""

    kind: str = "point"
    point: np.ndarray = None
    lower: np.ndarray = None
    upper: np.ndarray = None
    mean: np.ndarray = None
    std: float = 1.0

    def __post_init__(self):
        if self.kind not in ("point", "uniform_box", "gaussian"):
            raise ConfigurationError(f"unknown initial law {self.kind!r}; valid: point, uniform_box, gaussian")
        if self.kind == "uniform_box" and not np.all(np.asarray(self.lower) < np.asarray(self.upper)):
            raise ConfigurationError("uniform_box initial law needs lower < upper")
        if self.kind == "gaussian" and not self.std >= 0:
            raise ConfigurationError("gaussian initial law needs std >= 0")

    def sample(self, particles, dim, seed, domain=None, workers=1, backend=None):
        ids = np.arange(particles)
        if self.kind == "point":
            p = np.zeros(dim) if self.point is None else np.asarray(self.point, dtype=np.float64)
            return np.broadcast_to(p, (particles, dim)).copy()
        if self.kind == "uniform_box":
            lo = np.broadcast_to(np.asarray(self.lower, dtype=np.float64), (dim,))
            hi = np.broadcast_to(np.asarray(self.upper, dtype=np.float64), (dim,))
            u = uniforms(seed, Channel.INITIAL, ids[:, None], 0, np.arange(dim)[None, :], workers, backend)
            return lo + (hi - lo) * u
        m = np.zeros(dim) if self.mean is None else np.asarray(self.mean, dtype=np.float64)
        x = m + self.std * normals(seed, Channel.INITIAL, ids, 0, dim, workers=workers, backend=backend)
        return x if domain is None else domain.project(x)

    def to_dict(self):
        d = {"kind": self.kind}
        for key in ("point", "lower", "upper", "mean"):
            v = getattr(self, key)
            if v is not None:
                d[key] = np.asarray(v, dtype=np.float64).tolist()
        if self.kind == "gaussian":
            d["std"] = self.std
        return d


@dataclass(frozen=True, eq=False)
class SchemeConfig:
    h: float
    particles: int
    law_mode: str = "interacting"
    initial: InitialLaw = field(default_factory=InitialLaw)
    enforce_H4: bool = True
    record: str = "full"
    workers: int = 1
    horizon: float = 1.0
    backend: str = None

    def __post_init__(self):
        if not self.h > 0:
            raise ConfigurationError("step h must be > 0")
        if int(self.particles) < 1:
            raise ConfigurationError("particles N must be >= 1")
        if self.law_mode not in ("interacting", "frozen"):
            raise ConfigurationError("law_mode must be interacting or frozen")
        if self.record not in ("full", "summary"):
            raise ConfigurationError("record must be full or summary")
        if int(self.workers) < 1:
            raise ConfigurationError("workers must be >= 1")
        uniform_grid(self.h, self.horizon)

    @property
    def grid(self):
        return uniform_grid(self.h, self.horizon)

    def to_dict(self):
        return {"h": self.h, "particles": int(self.particles), "law_mode": self.law_mode,
                "initial": self.initial.to_dict(), "enforce_H4": self.enforce_H4, "record": self.record,
                "horizon": self.horizon}


class SolutionEnsemble:
    """Output of :func:`simulate`.

    Always present: ``grid``, ``x0``, ``x_final``, ``law_mean`` (M+1, d),
    ``law_m2`` (M+1,), ``ybar`` (M, d) the law snapshot each step used, ``tv`` and ``sup_sq`` per particle, the per-particle
    totals ``K``, ``drift_sum``, ``noise_sum``, ``jump_sum``, ``comp_sum``
    (so that ``x_final == x0 - K + drift_sum + noise_sum + jump_sum - comp_sum``),
    and the jump event log ``jumps``.

    With ``record == "full"`` also per base step: ``X`` (M+1, N, d),
    ``dK`` (M, N, d), ``xk`` (M, N) = sum of <X_new, dK> over substeps,
    ``xint`` (M, N, d) = sum of delta * X_new, and ``dtv`` (M, N).
    """

    def __init__(self, grid, n, d, full):
        m = grid.size - 1
        self.grid = grid
        self.h = float(grid[1] - grid[0])
        self.full = full
        if full:
            need = 8 * n * (d * (3 * m + 1) + 2 * m)
            if need > FULL_RECORD_LIMIT:
                raise ConfigurationError(f"full recording needs {need / 1e9:.1f} GB; use record = summary")
            self.X = np.empty((m + 1, n, d))
            self.dK = np.zeros((m, n, d))
            self.xk = np.zeros((m, n))
            self.xint = np.zeros((m, n, d))
            self.dtv = np.zeros((m, n))
        self.law_mean = np.empty((m + 1, d))
        self.ybar = np.empty((m, d))
        self.law_m2 = np.empty(m + 1)
        self.w2_prev = None
        self.tv = np.zeros(n)
        self.sup_sq = np.zeros(n)
        self.K = np.zeros((n, d))
        self.drift_sum = np.zeros((n, d))
        self.noise_sum = np.zeros((n, d))
        self.jump_sum = np.zeros((n, d))
        self.comp_sum = np.zeros((n, d))
        self.jumps = {}

    @property
    def particles(self):
        return self.x0.shape[0]

    @property
    def dim(self):
        return self.x0.shape[1]

    def K_path(self):
        if not self.full:
            raise UsageError("K path needs record = full")
        out = np.zeros((self.grid.size,) + self.K.shape)
        np.cumsum(self.dK, axis=0, out=out[1:])
        return out

    def tv_path(self):
        if not self.full:
            raise UsageError("variation path needs record = full")
        out = np.zeros((self.grid.size, self.particles))
        np.cumsum(self.dtv, axis=0, out=out[1:])
        return out

    def measure(self, k):
        if not self.full:
            raise UsageError("per-time laws need record = full")
        return EmpiricalMeasure(self.X[k])

    def moment_statistic(self):
        """mean over particles of sup_t |X_t|^2 + ||K||_TV."""
        return float(np.mean(self.sup_sq + self.tv))

    def telescoped_residual(self):
        rebuilt = self.x0 - self.K + self.drift_sum + self.noise_sum + self.jump_sum - self.comp_sum
        return float(np.max(np.abs(rebuilt - self.x_final)))


# ---------------------------------------------------------------- pieces

def _resolve(operator, y, lam, workers=1):
    """Resolvent with a per-row step ``lam`` (rows with lam == 0 are left alone)."""
    if operator.kind == "zero":
        return y.copy()
    if operator.kind == "normal_cone":
        if workers > 1 and y.shape[0] >= 4096 and operator.domain.kind == "halfspace_intersection":
            bounds = np.linspace(0, y.shape[0], workers + 1).astype(int)
            with ThreadPoolExecutor(max_workers=workers) as ex:
                parts = list(ex.map(lambda ab: operator.domain.project(y[ab[0]:ab[1]]),
                                    zip(bounds[:-1], bounds[1:])))
            return np.concatenate(parts, axis=0)
        return operator.domain.project(y)
    out = y.copy()
    lam = np.broadcast_to(lam, (y.shape[0],))
    for val in np.unique(lam):
        if val > 0:
            rows = lam == val
            out[rows] = operator.resolvent(y[rows], float(val))
    return out


class _Accum:
    """Per-step accumulators shared by the substeps of one base step."""

    def __init__(self, n, d):
        self.dK = np.zeros((n, d))
        self.xk = np.zeros(n)
        self.xint = np.zeros((n, d))
        self.dtv = np.zeros(n)
        self.drift = np.zeros((n, d))
        self.noise = np.zeros((n, d))
        self.jump = np.zeros((n, d))
        self.comp = np.zeros((n, d))
        self.sup_sq = np.zeros(n)


def _continuous(x, rows, delta, dw, kernel, operator, levy, ybar, acc, workers):
    xr = x if rows is None else x[rows]
    b = kernel.drift_field(xr, ybar)
    c = compensator_field(kernel, xr, ybar, levy)
    s = kernel.diffusion_apply(xr, ybar, dw)
    dl = delta[:, None] if np.ndim(delta) else delta
    y = xr + (b - c) * dl + s
    xn = _resolve(operator, y, delta, workers)
    dk = y - xn
    if operator.kind != "zero" and not np.all(operator.domain.contains(xn, BOUNDARY_TOL)):
        raise DomainEscapeError("resolvent output left the closed domain")
    sel = slice(None) if rows is None else rows
    acc.dK[sel] += dk
    acc.xk[sel] += np.sum(xn * dk, axis=1)
    acc.xint[sel] += dl * xn
    acc.dtv[sel] += np.sqrt(np.sum(dk * dk, axis=1))
    acc.drift[sel] += b * dl
    acc.comp[sel] += c * dl
    acc.noise[sel] += s
    acc.sup_sq[sel] = np.maximum(acc.sup_sq[sel], np.sum(xn * xn, axis=1))
    if rows is None:
        return xn
    x[rows] = xn
    return x


def step(x, kernel, operator, ybar, h, dw, levy=None, jumps=None, enforce_H4=True, workers=1,
         _acc=None, _log=None):
    """Advance the ensemble ``x`` (N, d) over one base step of length ``h``.

    ``ybar`` is the law snapshot (its mean), ``dw`` the Brownian increments
    (N, d). ``jumps`` (optional) is a dict of arrays ``particle``,
    ``offset`` (time since the step start, in (0, h]), ``mark``, ``rank``
    (index among the particle's jumps in this step) and ``w`` (Brownian
    value at the jump time relative to the step start), sorted by particle
    then time. Returns ``(x_new, dK)``.
    """
    from .noise import LevyConfig

    levy = levy if levy is not None else LevyConfig.none()
    x = np.array(x, dtype=np.float64, copy=True)
    n, d = x.shape
    ybar = np.asarray(ybar, dtype=np.float64).reshape(d)
    acc = _acc if _acc is not None else _Accum(n, d)
    if jumps is None or len(jumps["particle"]) == 0:
        x = _continuous(x, None, h, dw, kernel, operator, levy, ybar, acc, workers)
        return x, acc.dK
    p, off, z, rank, w = (jumps[k] for k in ("particle", "offset", "mark", "rank", "w"))
    cur_t = np.zeros(n)
    cur_w = np.zeros((n, d))
    for r in range(int(rank.max()) + 1):
        sel = np.flatnonzero(rank == r)
        rows = p[sel]
        delta = off[sel] - cur_t[rows]
        x = _continuous(x, rows, delta, w[sel] - cur_w[rows], kernel, operator, levy, ybar, acc, workers)
        cur_t[rows] = off[sel]
        cur_w[rows] = w[sel]
        xpre = x[rows]
        g = kernel.jump_amplitude(xpre, ybar) * z[sel]
        post = xpre + g
        jump_dk = np.zeros_like(post)
        if operator.kind != "zero":
            inside = operator.domain.contains(post, BOUNDARY_TOL)
            if not np.all(inside):
                bad = np.flatnonzero(~inside)[0]
                if enforce_H4:
                    raise ScenarioError(
                        f"jump leaves the closed domain (H4 violated): x={xpre[bad].tolist()}, "
                        f"z={np.atleast_1d(z[sel][bad]).tolist()}, x+G={post[bad].tolist()}")
                fixed = operator.domain.project(post)
                jump_dk = post - fixed
                acc.dK[rows] += jump_dk
                acc.xk[rows] += np.sum(fixed * jump_dk, axis=1)
                acc.dtv[rows] += np.sqrt(np.sum(jump_dk**2, axis=1))
                post = fixed
        x[rows] = post
        acc.jump[rows] += g
        acc.sup_sq[rows] = np.maximum(acc.sup_sq[rows], np.sum(post * post, axis=1))
        if _log is not None:
            _log.append((sel, xpre, g, np.sqrt(np.sum(jump_dk**2, axis=1))))
    x = _continuous(x, None, h - cur_t, dw - cur_w, kernel, operator, levy, ybar, acc, workers)
    return x, acc.dK


# -------------------------------------------------------------- simulate

def _law_flow_means(law_flow, steps, d):
    if law_flow is None:
        raise UsageError("frozen law mode needs a law flow")
    if isinstance(law_flow, (list, tuple)) and law_flow and isinstance(law_flow[0], EmpiricalMeasure):
        law_flow = np.stack([m.mean() for m in law_flow])
    flow = np.asarray(law_flow, dtype=np.float64).reshape(-1, d)
    if flow.shape[0] != steps + 1:
        raise UsageError(f"law flow has {flow.shape[0]} times, grid has {steps + 1}")
    return flow


def initial_state(operator, scheme, seed, x0=None):
    """Initial particles, projected into the domain with a logged warning if needed."""
    d = operator.dim
    n = int(scheme.particles)
    if x0 is None:
        x = scheme.initial.sample(n, d, seed, operator.domain, scheme.workers, scheme.backend)
    else:
        x = np.array(np.broadcast_to(np.asarray(x0, dtype=np.float64).reshape(-1, d), (n, d)))
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("initial positions must be finite")
    outside = ~operator.domain.contains(x, BOUNDARY_TOL)
    if np.any(outside):
        log.warning("%d of %d initial positions lie outside the closed domain; projecting them in",
                    int(outside.sum()), n)
        x = operator.domain.project(x)
    return x


def simulate(kernel, operator, levy, scheme, seed, x0=None, law_flow=None, noise=None):
    """Run the scheme over the jump-refined grid and return a :class:`SolutionEnsemble`."""
    d = kernel.dim
    if operator.dim != d:
        raise ConfigurationError("operator and kernel dimensions disagree")
    if levy.enabled and levy.mark_dim not in (1, d):
        raise ConfigurationError("mark dimension must be 1 or the state dimension")
    grid = scheme.grid
    steps = grid.size - 1
    n = int(scheme.particles)
    workers = int(scheme.workers)
    if noise is None:
        noise = NoiseEnsemble(levy, grid, n, d, seed, workers=workers, backend=scheme.backend)
    elif noise.particles != n or noise.grid.size != grid.size:
        raise UsageError("supplied noise does not match the scheme")
    flow = _law_flow_means(law_flow, steps, d) if scheme.law_mode == "frozen" else None
    x = initial_state(operator, scheme, seed, x0)
    ens = SolutionEnsemble(grid, n, d, scheme.record == "full")
    ens.x0 = x.copy()
    ens.sup_sq[:] = np.sum(x * x, axis=1)
    events = []
    for k in range(steps):
        ens.law_mean[k] = x.mean(axis=0)
        ens.law_m2[k] = np.sqrt(np.mean(np.sum(x * x, axis=1)))
        if ens.full:
            ens.X[k] = x
        ybar = flow[k] if flow is not None else ens.law_mean[k]
        ens.ybar[k] = ybar
        dw = noise.brownian(k)
        jumps = None
        p, t, z, rank = noise.jumps_in_step(k)
        if p.size:
            w = noise.bridge(k, p, t, rank, dw[p])
            jumps = {"particle": p, "offset": t - grid[k], "mark": z, "rank": rank, "w": w}
        acc = _Accum(n, d)
        step_log = []
        x, _ = step(x, kernel, operator, ybar, grid[k + 1] - grid[k], dw, levy, jumps,
                    scheme.enforce_H4, workers, _acc=acc, _log=step_log)
        for sel, xpre, g, jdk in step_log:
            events.append((np.full(sel.size, k), p[sel], t[sel], z[sel], xpre, g, jdk))
        ens.K += acc.dK
        ens.tv += acc.dtv
        ens.sup_sq = np.maximum(ens.sup_sq, acc.sup_sq)
        ens.drift_sum += acc.drift
        ens.noise_sum += acc.noise
        ens.jump_sum += acc.jump
        ens.comp_sum += acc.comp
        if ens.full:
            ens.dK[k] = acc.dK
            ens.xk[k] = acc.xk
            ens.xint[k] = acc.xint
            ens.dtv[k] = acc.dtv
    ens.law_mean[steps] = x.mean(axis=0)
    ens.law_m2[steps] = np.sqrt(np.mean(np.sum(x * x, axis=1)))
    if ens.full:
        ens.X[steps] = x
    ens.x_final = x
    ens.jumps = _event_table(events, levy.mark_dim, d)
    ens.noise = noise
    return ens


def _event_table(events, m, d):
    if not events:
        return {"step": np.zeros(0, dtype=np.int64), "particle": np.zeros(0, dtype=np.int64),
                "time": np.zeros(0), "mark": np.zeros((0, m)), "x_pre": np.zeros((0, d)),
                "G": np.zeros((0, d)), "jump_dK": np.zeros(0)}
    cols = list(zip(*events))
    tab = {"step": np.concatenate(cols[0]), "particle": np.concatenate(cols[1]),
           "time": np.concatenate(cols[2]), "mark": np.concatenate(cols[3]),
           "x_pre": np.concatenate(cols[4]), "G": np.concatenate(cols[5]), "jump_dK": np.concatenate(cols[6])}
    order = np.lexsort((tab["time"], tab["particle"]))
    return {key: val[order] for key, val in tab.items()}


# ---------------------------------------------------------------- Picard

def _w2_flow(xa, xb, method=None):
    """W2 between the empirical laws of xa[k] and xb[k] for every grid time."""
    if xa.shape[2] == 1 and method in (None, "exact_1d"):
        sa = np.sort(xa[:, :, 0], axis=1)
        sb = np.sort(xb[:, :, 0], axis=1)
        return np.sqrt(np.mean((sa - sb) ** 2, axis=1))
    return np.array([wasserstein2(EmpiricalMeasure(a), EmpiricalMeasure(b), method=method)
                     for a, b in zip(xa, xb)])


@dataclass
class PicardResult:
    ensemble: SolutionEnsemble
    gaps: list
    converged: bool
    iterations: int

    @property
    def ratios(self):
        g = np.asarray(self.gaps)
        with np.errstate(divide="ignore", invalid="ignore"):
            return g[1:] / g[:-1]


def picard_solve(kernel, operator, levy, scheme, seed, max_iters=15, w2_tol=1e-3, w2_method=None):
    """Iterate the frozen-law scheme on the law flow with one shared noise realization.

    Iterate 1 uses the constant flow ``mu^0_t = law(X_0)``. The loop stops
    once the sup over grid times of W2(mu^k_t, mu^{k-1}_t) drops below
    ``w2_tol``; otherwise the result carries ``converged = False``.
    """
    if max_iters < 1:
        raise UsageError("max_iters must be >= 1")
    frozen = SchemeConfig(scheme.h, scheme.particles, "frozen", scheme.initial, scheme.enforce_H4, "full",
                          scheme.workers, scheme.horizon, scheme.backend)
    grid = frozen.grid
    noise = NoiseEnsemble(levy, grid, int(scheme.particles), kernel.dim, seed, workers=int(scheme.workers),
                          backend=scheme.backend)
    x0 = initial_state(operator, frozen, seed)
    prev_paths = np.broadcast_to(x0, (grid.size,) + x0.shape)
    prev_mean = np.broadcast_to(x0.mean(axis=0), (grid.size, kernel.dim))
    gaps = []
    ens = None
    converged = False
    for it in range(1, max_iters + 1):
        ens = simulate(kernel, operator, levy, frozen, seed, x0=x0, law_flow=prev_mean, noise=noise)
        per_t = _w2_flow(ens.X, prev_paths, w2_method)
        ens.w2_prev = per_t
        gaps.append(float(per_t.max()))
        log.info("picard iteration %d: sup-t W2 gap %.3e", it, gaps[-1])
        if gaps[-1] < w2_tol:
            converged = True
            break
        prev_paths, prev_mean = ens.X, ens.law_mean
    if not converged:
        log.warning("picard iteration did not reach w2_tol=%g in %d iterations", w2_tol, max_iters)
    return PicardResult(ens, gaps, converged, len(gaps))


# --------------------------------------------------------------- cascade

@dataclass
class CascadeReport:
    levels: list
    grid: np.ndarray
    curves: dict  # (m, n) -> g(t) = mean_i |X^m_i(t) - X^n_i(t)|^2
    errors: dict  # (m, n) -> max_t g(t)

    def sequence(self):
        pairs = sorted(self.errors)
        return [self.errors[p] for p in pairs]


def mollified_cascade(kernel, operator, levy, scheme, levels, seed, quadrature="tensor_gauss",
                      points_per_axis=48, include_direct=False):
    """Simulate with ``mollify(kernel, n)`` for each ``n`` in ``levels`` on common noise.

    Reports ``e(m, n) = max_t mean_i |X^m_i - X^n_i|^2`` for consecutive
    levels (and against the unmollified kernel when ``include_direct``).
    """
    levels = [int(v) for v in levels]
    if len(levels) < 2 or any(b <= a for a, b in zip(levels, levels[1:])) or levels[0] < 1:
        raise UsageError("cascade levels must be a strictly increasing list of positive integers")
    full = SchemeConfig(scheme.h, scheme.particles, scheme.law_mode, scheme.initial, scheme.enforce_H4, "full",
                        scheme.workers, scheme.horizon, scheme.backend)
    noise = NoiseEnsemble(levy, full.grid, int(full.particles), kernel.dim, seed, workers=int(full.workers),
                          backend=scheme.backend)
    x0 = initial_state(operator, full, seed)
    paths = {}
    for n in levels:
        cfg = MollifierConfig(n, kernel.dim, quadrature=quadrature, points_per_axis=points_per_axis, seed=seed)
        paths[n] = simulate(mollify(kernel, cfg), operator, levy, full, seed, x0=x0, noise=noise).X
    if include_direct:
        paths["direct"] = simulate(kernel, operator, levy, full, seed, x0=x0, noise=noise).X
    curves, errors = {}, {}
    keys = levels + (["direct"] if include_direct else [])
    for a, b in zip(keys, keys[1:]):
        g = np.mean(np.sum((paths[a] - paths[b]) ** 2, axis=2), axis=1)
        curves[(a, b)] = g
        errors[(a, b)] = float(g.max())
    return CascadeReport(levels, full.grid, curves, errors)


# --------------------------------------------------------------- coupled

@dataclass
class CoupledReport:
    grid: np.ndarray
    g: np.ndarray
    bit_exact: bool
    max_step_rate: float  # max_k log(g_{k+1}/g_k)/h over steps with g_k > 0


def coupled_run(kernel, operator, levy, scheme, x0_a, x0_b, seed):
    """Two runs on identical noise from different starts; g(t) = mean_i |X^a_i - X^b_i|^2."""
    full = SchemeConfig(scheme.h, scheme.particles, scheme.law_mode, scheme.initial, scheme.enforce_H4, "full",
                        scheme.workers, scheme.horizon, scheme.backend)
    noise = NoiseEnsemble(levy, full.grid, int(full.particles), kernel.dim, seed, workers=int(full.workers),
                          backend=scheme.backend)
    a = simulate(kernel, operator, levy, full, seed, x0=x0_a, noise=noise)
    b = simulate(kernel, operator, levy, full, seed, x0=x0_b, noise=noise)
    diff = a.X - b.X
    g = np.mean(np.sum(diff * diff, axis=2), axis=1)
    pos = (g[:-1] > 0) & (g[1:] > 0)
    rate = float(np.max(np.log(g[1:][pos] / g[:-1][pos]) / a.h)) if np.any(pos) else 0.0
    return CoupledReport(full.grid, g, bool(np.array_equal(a.X, b.X)), rate)
