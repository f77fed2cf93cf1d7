"""Brownian increments and finite-activity Poisson jumps from counter-based streams.

Brownian increments on the base grid are generated lazily, one step at a
time, so memory does not grow with the number of steps. Jumps are drawn
eagerly (they are few) and stored in compressed per-particle form. When a
step contains jump times, the Brownian path inside it is filled in by a
Brownian bridge, so the base-grid increment never depends on the jumps.
"""

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.stats import poisson

from .errors import ConfigurationError, InvalidInputError
from .rng import Channel, normals, uniform_pairs

LEVY_KINDS = ("none", "discrete", "annulus")


@dataclass(frozen=True, eq=False)
class LevyConfig:
    """Finite Lévy measure ``nu`` on R^m.

    ``discrete``: atoms (K, m) with masses (K,). ``annulus``: uniform on
    ``r_min <= |z| <= r_max`` with total mass ``mass`` (m <= 2).
    ``small_cutoff`` splits marks into small (``|z| <= alpha``) and large.
    """

    kind: str = "none"
    mark_dim: int = 1
    atoms: np.ndarray = None
    masses: np.ndarray = None
    r_min: float = 0.0
    r_max: float = 0.0
    mass: float = 0.0
    small_cutoff: float = 1.0
    compensated: bool = True
    quad_points: int = None  # radial Gauss points; default 64 for m = 1, 16 for m = 2

    def __post_init__(self):
        if self.kind not in LEVY_KINDS:
            raise ConfigurationError(f"unknown levy kind {self.kind!r}; valid: {', '.join(LEVY_KINDS)}")
        if self.mark_dim < 1:
            raise ConfigurationError("mark dimension must be >= 1")
        if not self.small_cutoff > 0:
            raise ConfigurationError("small_cutoff must be positive")
        if self.kind == "discrete":
            atoms = np.asarray(self.atoms, dtype=np.float64).reshape(-1, self.mark_dim)
            masses = np.asarray(self.masses, dtype=np.float64).ravel()
            if atoms.shape[0] != masses.size or masses.size == 0:
                raise ConfigurationError("discrete levy measure needs one mass per atom")
            if np.any(masses < 0) or not np.all(np.isfinite(masses)) or not np.all(np.isfinite(atoms)):
                raise ConfigurationError("atom masses must be finite and nonnegative")
            object.__setattr__(self, "atoms", atoms)
            object.__setattr__(self, "masses", masses)
        elif self.kind == "annulus":
            if self.mark_dim > 2:
                raise ConfigurationError("annulus levy measure is supported for mark dimension 1 or 2")
            if not (0 <= self.r_min < self.r_max < np.inf):
                raise ConfigurationError("annulus needs 0 <= r_min < r_max < inf")
            if self.mass < 0 or not np.isfinite(self.mass):
                raise ConfigurationError("annulus mass must be finite and nonnegative")

    @classmethod
    def none(cls, mark_dim=1):
        return cls("none", mark_dim)

    @classmethod
    def discrete(cls, atoms, masses, small_cutoff=1.0, compensated=True):
        atoms = np.asarray(atoms, dtype=np.float64)
        m = 1 if atoms.ndim < 2 else atoms.shape[1]
        return cls("discrete", m, atoms, masses, small_cutoff=small_cutoff, compensated=compensated)

    @classmethod
    def annulus(cls, r_min, r_max, mass, mark_dim=1, small_cutoff=1.0, compensated=True):
        return cls("annulus", mark_dim, r_min=float(r_min), r_max=float(r_max), mass=float(mass),
                   small_cutoff=small_cutoff, compensated=compensated)

    @property
    def total_mass(self):
        if self.kind == "discrete":
            return float(self.masses.sum())
        if self.kind == "annulus":
            return self.mass
        return 0.0

    @property
    def enabled(self):
        return self.kind != "none"

    def quadrature(self):
        """Nodes (Q, m) and weights (Q,) with ``sum w f(z) ~ int f d nu``; exact for discrete."""
        return self._quadrature

    @cached_property
    def _quadrature(self):
        nodes, w = self._build_quadrature()
        nodes.flags.writeable = False
        w.flags.writeable = False
        return nodes, w

    def _build_quadrature(self):
        if self.kind == "discrete":
            return self.atoms, self.masses
        if self.kind == "none" or self.mass == 0:
            return np.zeros((0, self.mark_dim)), np.zeros(0)
        q = self.quad_points or (64 if self.mark_dim == 1 else 16)
        g, w = np.polynomial.legendre.leggauss(q)
        lo, hi = self.r_min, self.r_max
        r = 0.5 * (hi - lo) * g + 0.5 * (hi + lo)
        wr = 0.5 * (hi - lo) * w
        if self.mark_dim == 1:
            nodes = np.concatenate([r, -r])[:, None]
            wts = np.concatenate([wr, wr]) / (2.0 * (hi - lo))
        else:
            k = 2 * q
            theta = 2.0 * np.pi * (np.arange(k) + 0.5) / k
            rr, tt = np.meshgrid(r, theta, indexing="ij")
            nodes = np.stack([(rr * np.cos(tt)).ravel(), (rr * np.sin(tt)).ravel()], axis=1)
            wts = (wr[:, None] * r[:, None] * np.full((1, k), 2.0 * np.pi / k)).ravel()
            wts = wts / (np.pi * (hi**2 - lo**2))
        return nodes, wts * self.mass

    def integrate(self, fn):
        """``int fn(z) nu(dz)`` where ``fn`` maps (Q, m) marks to (Q, ...) values."""
        nodes, w = self.quadrature()
        if w.size == 0:
            return 0.0
        return np.tensordot(w, fn(nodes), axes=(0, 0))

    def first_moment(self, cutoff=None):
        """``int z nu(dz)``, restricted to ``|z| <= cutoff`` when given."""
        nodes, w = self.quadrature()
        if w.size == 0:
            return np.zeros(self.mark_dim)
        if cutoff is not None:
            w = np.where(np.linalg.norm(nodes, axis=1) <= cutoff, w, 0.0)
        return w @ nodes

    def sample_marks(self, u):
        """Map uniform pairs (J, 2) to marks (J, m) distributed as nu / nu(Z)."""
        if self.kind == "discrete":
            cdf = np.cumsum(self.masses) / self.masses.sum()
            cdf[-1] = 1.0
            idx = np.minimum(np.searchsorted(cdf, u[:, 0], side="right"), cdf.size - 1)
            return self.atoms[idx]
        lo, hi, m = self.r_min, self.r_max, self.mark_dim
        r = (lo**m + u[:, 0] * (hi**m - lo**m)) ** (1.0 / m)
        if m == 1:
            return np.where(u[:, 1] < 0.5, -r, r)[:, None]
        theta = 2.0 * np.pi * u[:, 1]
        return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=1)

    def to_dict(self):
        d = {"kind": self.kind, "mark_dim": self.mark_dim, "small_cutoff": self.small_cutoff,
             "compensated": self.compensated}
        if self.kind == "discrete":
            d.update(atoms=self.atoms.tolist(), masses=self.masses.tolist())
        elif self.kind == "annulus":
            d.update(r_min=self.r_min, r_max=self.r_max, mass=self.mass)
        return d


def uniform_grid(h, horizon=1.0):
    steps = int(round(horizon / h))
    if steps < 1 or abs(steps * h - horizon) > 1e-9 * horizon:
        raise InvalidInputError(f"step {h} does not divide the horizon {horizon}")
    return np.arange(steps + 1) * (horizon / steps)


class NoiseEnsemble:
    """Noise for ``particles`` paths on a grid over [0, 1].

    Jump events are held in CSR form per particle (``offsets``) and also
    indexed by the grid step that contains them: a jump at ``tau`` belongs
    to step ``k`` when ``t_k < tau <= t_{k+1}``.
    """

    def __init__(self, levy, grid, particles, dim, seed, workers=1, backend=None):
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 1 or grid.size < 2 or np.any(np.diff(grid) <= 0):
            raise InvalidInputError("time grid must be strictly increasing")
        if particles < 1:
            raise InvalidInputError("need at least one particle")
        if levy.enabled and not levy.total_mass > 0:
            raise ConfigurationError("jumps are enabled but the levy measure has zero mass")
        self.levy = levy
        self.grid = grid
        self.particles = int(particles)
        self.dim = int(dim)
        self.seed = int(seed)
        self.workers = int(workers)
        self.backend = backend
        self._dw_table = None
        self._draw_jumps()

    @property
    def steps(self):
        return self.grid.size - 1

    def _draw_jumps(self):
        n, lam = self.particles, self.levy.total_mass
        ids = np.arange(n)
        if self.levy.enabled:
            t0, t1 = self.grid[0], self.grid[-1]
            u = uniform_pairs(self.seed, Channel.JUMP_COUNT, ids, workers=self.workers, backend=self.backend)[:, 0]
            counts = poisson.ppf(u, lam * (t1 - t0)).astype(np.int64)
        else:
            counts = np.zeros(n, dtype=np.int64)
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        total = int(offsets[-1])
        owner = np.repeat(ids, counts)
        rank = np.arange(total) - offsets[owner]
        if total:
            ut = uniform_pairs(self.seed, Channel.JUMP_TIME, owner, sub=rank, workers=self.workers,
                               backend=self.backend)[:, 0]
            times = self.grid[0] + (self.grid[-1] - self.grid[0]) * ut
            # sort within each particle: order statistics of the uniform times
            order = np.lexsort((times, owner))
            times = times[order]
            um = uniform_pairs(self.seed, Channel.JUMP_MARK, owner, sub=rank, workers=self.workers,
                               backend=self.backend)
            marks = self.levy.sample_marks(um)
        else:
            times = np.zeros(0)
            marks = np.zeros((0, self.levy.mark_dim))
        step = np.clip(np.searchsorted(self.grid, times, side="left") - 1, 0, self.steps - 1)
        self.counts, self.offsets = counts, offsets
        self.jump_particle, self.jump_time, self.jump_mark, self.jump_step = owner, times, marks, step
        # secondary index by (step, particle, time)
        by_step = np.lexsort((times, owner, step))
        self._by_step = by_step
        self._step_offsets = np.searchsorted(step[by_step], np.arange(self.steps + 1), side="left")

    # ---------------------------------------------------------- Brownian

    def brownian(self, k, particles=None):
        """Increment ``W(t_{k+1}) - W(t_k)`` of shape (n, d)."""
        ids = np.arange(self.particles) if particles is None else np.asarray(particles)
        if self._dw_table is not None:
            return self._dw_table[k][ids]
        dt = self.grid[k + 1] - self.grid[k]
        z = normals(self.seed, Channel.BROWNIAN, ids, k, self.dim, workers=self.workers, backend=self.backend)
        return z * np.sqrt(dt)

    def bridge_normals(self, k, particles, rank):
        npairs = (self.dim + 1) // 2
        return normals(self.seed, Channel.BRIDGE, particles, k, self.dim, sub_base=rank * npairs,
                       backend=self.backend)

    def jumps_in_step(self, k):
        """Events in step ``k`` sorted by particle then time: (particle, time, mark, rank-in-step)."""
        sel = self._by_step[self._step_offsets[k]:self._step_offsets[k + 1]]
        p = self.jump_particle[sel]
        if p.size:
            first = np.r_[True, p[1:] != p[:-1]]
            start = np.maximum.accumulate(np.where(first, np.arange(p.size), 0))
            rank = np.arange(p.size) - start
        else:
            rank = np.zeros(0, dtype=np.int64)
        return p, self.jump_time[sel], self.jump_mark[sel], rank

    def bridge(self, k, particles, times, rank, dw_full):
        """Brownian values ``W(tau) - W(t_k)`` at the jump times of step ``k``.

        Events are processed rank by rank; each value is drawn from the
        bridge between the previous point and ``(t_{k+1}, dw_full)``.
        """
        t_end = self.grid[k + 1]
        out = np.zeros((particles.size, self.dim))
        prev_t = np.full(particles.size, self.grid[k])
        prev_w = np.zeros((particles.size, self.dim))
        for r in range(int(rank.max()) + 1 if rank.size else 0):
            sel = np.flatnonzero(rank == r)
            if r > 0:
                prev_t[sel] = times[sel - 1]
                prev_w[sel] = out[sel - 1]
            span = t_end - prev_t[sel]
            frac = np.where(span > 0, (times[sel] - prev_t[sel]) / np.where(span > 0, span, 1.0), 1.0)
            mean = prev_w[sel] + frac[:, None] * (dw_full[sel] - prev_w[sel])
            var = np.maximum((times[sel] - prev_t[sel]) * (t_end - times[sel]) / np.where(span > 0, span, 1.0), 0.0)
            z = self.bridge_normals(k, particles[sel], r)
            out[sel] = mean + np.sqrt(var)[:, None] * z
        return out

    # ------------------------------------------------------------- replay

    def materialize(self):
        """Full Brownian table (steps, N, d)."""
        return np.stack([self.brownian(k) for k in range(self.steps)])

    def save(self, path):
        np.savez(path, grid=self.grid, seed=self.seed, dim=self.dim, particles=self.particles,
                 dw=self.materialize(), counts=self.counts, times=self.jump_time, marks=self.jump_mark)

    @classmethod
    def load(cls, path, levy, backend=None):
        """Rebuild an ensemble from :meth:`save`; bridge draws are still keyed by the stored seed."""
        data = np.load(path)
        ens = cls.__new__(cls)
        ens.levy = levy
        ens.grid = data["grid"]
        ens.particles = int(data["particles"])
        ens.dim = int(data["dim"])
        ens.seed = int(data["seed"])
        ens.workers = 1
        ens.backend = backend
        ens._dw_table = data["dw"]
        counts = data["counts"]
        offsets = np.zeros(counts.size + 1, dtype=np.int64)
        np.cumsum(counts, out=offsets[1:])
        ens.counts, ens.offsets = counts, offsets
        ens.jump_particle = np.repeat(np.arange(counts.size), counts)
        ens.jump_time, ens.jump_mark = data["times"], data["marks"]
        ens.jump_step = np.clip(np.searchsorted(ens.grid, ens.jump_time, side="left") - 1, 0, ens.steps - 1)
        ens._by_step = np.lexsort((ens.jump_time, ens.jump_particle, ens.jump_step))
        ens._step_offsets = np.searchsorted(ens.jump_step[ens._by_step], np.arange(ens.steps + 1), side="left")
        return ens


def sample_noise(levy, grid, particles, dim, seed, workers=1, backend=None):
    return NoiseEnsemble(levy, grid, particles, dim, seed, workers=workers, backend=backend)


def compensator_drift(kernel, x, mu, levy):
    """``int G[x, mu, z] nu(dz)`` for one point; exact for discrete nu.

    The catalog jump maps are linear in the mark, so the integral reduces to
    the amplitude times the first moment of nu.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if not levy.enabled:
        return np.zeros_like(x)
    g = kernel.jump_amplitude(x[None, :], mu.mean()[None, :])[0]
    return g * levy.first_moment()


def compensator_field(kernel, x, ybar, levy):
    """Vectorized compensator for rows of ``x`` (n, d)."""
    if not levy.enabled or not levy.compensated:
        return np.zeros_like(x)
    return kernel.jump_amplitude(x, ybar) * levy.first_moment()


def decompose_marks(noise, t):
    """Split the mark process at time ``t`` per particle.

    Returns ``(small, large)``: the compensated sum of marks with
    ``|z| <= alpha`` and the raw sum of the larger ones, each (N, m).
    """
    levy = noise.levy
    m = levy.mark_dim
    small = np.zeros((noise.particles, m))
    large = np.zeros((noise.particles, m))
    if noise.jump_time.size:
        live = noise.jump_time <= t
        is_small = np.linalg.norm(noise.jump_mark, axis=1) <= levy.small_cutoff
        for mask, acc in ((live & is_small, small), (live & ~is_small, large)):
            np.add.at(acc, noise.jump_particle[mask], noise.jump_mark[mask])
    if levy.enabled:
        small -= (t - noise.grid[0]) * levy.first_moment(cutoff=levy.small_cutoff)
    return small, large
