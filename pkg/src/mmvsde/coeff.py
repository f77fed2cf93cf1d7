"""Two-point coefficient kernels, their mean-field functionals, mollification and truncation.

Every catalog kernel is affine in the law variable ``y``:

    b(x, y)    = drift_x(x) + y @ K.T
    sigma(x,y) = S0 + alpha diag(x) + beta diag(y)
    G(x, y, z) = (c + a x + b y) * z

so ``b[x, mu]`` only needs the mean of ``mu``. The literal sums
``mean_field_*`` are kept as the reference route.
"""

from dataclasses import dataclass, field, replace
from math import gamma, pi

import numpy as np
from scipy import integrate
from scipy.stats import qmc

from .errors import ConfigurationError, InvalidInputError
from .measure import EmpiricalMeasure, wasserstein2

E_INV = np.exp(-1.0)


# ---------------------------------------------------------------- moduli

def modulus(name, u):
    """Concave modulus from the catalog: ``linear`` or ``log_osgood``."""
    u = np.asarray(u, dtype=np.float64)
    if name == "linear":
        return u
    if name == "log_osgood":
        small = (u > 0) & (u < E_INV)
        safe = np.where(small, u, 1.0)
        return np.where(small, -safe * np.log(safe), np.where(u >= E_INV, E_INV, 0.0))
    raise InvalidInputError(f"unknown modulus {name!r}; valid: linear, log_osgood")


# ------------------------------------------------------------- profiles

def osgood_profile(x):
    """Radial profile ``x ln|x|`` for ``|x| <= 1/e``, held at ``-x/(e|x|)`` beyond.

    The slope of ``r ln r`` vanishes at ``r = 1/e``, so the matching linear
    extension is constant in the radial direction.
    """
    x = np.asarray(x, dtype=np.float64)
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    inner = r <= E_INV
    rs = np.where(r > 0, r, 1.0)
    return np.where(inner, x * np.log(rs), -x / (np.e * rs))


def _clamp(x, level):
    if level is None:
        return x
    r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    return np.where(r > level, x * (level / np.where(r > 0, r, 1.0)), x)


# ------------------------------------------------------------ mollifier

def _unit_ball_bump_mass(d):
    sphere = 2.0 * pi ** (d / 2.0) / gamma(d / 2.0)
    val, _ = integrate.quad(lambda r: r ** (d - 1) * np.exp(-1.0 / (1.0 - r * r)), 0.0, 1.0,
                            epsabs=1e-14, epsrel=1e-12, limit=200)
    return sphere * val


@dataclass(frozen=True)
class MollifierConfig:
    """Smoothing kernel J^n for level ``n`` in dimension ``dim``.

    ``a0`` is the mass of ``exp(-1/(1-|v|^2))`` over the unit ball, then
    ``b1 = (4n/a0)^(1/(d+1))`` and ``a1 = b1/(4n)``, which makes
    ``a1 * b1^d * a0 = 1``.
    """

    n: int
    dim: int
    quadrature: str = "tensor_gauss"
    points_per_axis: int = 48
    samples: int = 4096
    seed: int = 0
    mass_tol: float = 1e-6
    a0: float = field(init=False)
    b1: float = field(init=False)
    a1: float = field(init=False)

    def __post_init__(self):
        if self.n < 1 or self.dim < 1:
            raise ConfigurationError("mollifier level and dimension must be >= 1")
        if self.quadrature not in ("tensor_gauss", "monte_carlo"):
            raise ConfigurationError(f"unknown quadrature {self.quadrature!r}")
        a0 = _unit_ball_bump_mass(self.dim)
        b1 = (4.0 * self.n / a0) ** (1.0 / (self.dim + 1))
        object.__setattr__(self, "a0", a0)
        object.__setattr__(self, "b1", b1)
        object.__setattr__(self, "a1", b1 / (4.0 * self.n))
        if abs(self.normalization - 1.0) > 1e-9:
            raise ConfigurationError("mollifier constants do not normalize")

    @property
    def normalization(self):
        return self.a1 * self.b1**self.dim * self.a0

    @property
    def support_radius(self):
        """Radius of the shift ``u/n`` applied to the argument."""
        return self.b1 / self.n

    def density(self, u):
        u = np.asarray(u, dtype=np.float64)
        s = np.sum(u * u, axis=-1) / self.b1**2
        inside = s < 1.0
        return np.where(inside, self.a1 * np.exp(-1.0 / (1.0 - np.where(inside, s, 0.0))), 0.0)

    def raw_rule(self):
        """Quadrature nodes ``u`` (Q, d) and weights for integrating against J^n (not renormalized)."""
        d = self.dim
        if self.quadrature == "tensor_gauss":
            g, w = np.polynomial.legendre.leggauss(self.points_per_axis)
            grids = np.meshgrid(*([g] * d), indexing="ij")
            nodes = np.stack([gr.ravel() for gr in grids], axis=1) * self.b1
            wts = np.ones(nodes.shape[0])
            for ax in np.meshgrid(*([w] * d), indexing="ij"):
                wts = wts * ax.ravel()
            wts = wts * self.b1**d * self.density(nodes)
        else:
            sampler = qmc.Sobol(d, scramble=True, seed=self.seed)
            m = int(np.ceil(np.log2(max(self.samples, 2))))
            cube = sampler.random_base2(m) * 2.0 - 1.0
            # antithetic pairing keeps the rule exactly symmetric
            cube = np.concatenate([cube, -cube], axis=0)
            nodes = cube * self.b1
            wts = (2.0 * self.b1) ** d / nodes.shape[0] * self.density(nodes)
        keep = wts > 0
        return nodes[keep], wts[keep]

    def rule(self):
        """Normalized rule; raises if the raw mass misses 1 by more than ``mass_tol``."""
        nodes, wts = self.raw_rule()
        mass = wts.sum()
        tol = self.mass_tol if self.quadrature == "tensor_gauss" else max(self.mass_tol, 1e-2)
        if abs(mass - 1.0) > tol:
            raise ConfigurationError(
                f"quadrature mass {mass:.10f} misses 1 by more than {tol:g}; raise the budget")
        return nodes, wts / mass


class RadialLattice:
    """Lazy 1-D lattice memo of a radial profile ``phi(r)`` with linear interpolation.

    Nodes are ``k * pitch``; values are filled on first use and never change.
    """

    def __init__(self, fn, pitch):
        self.fn = fn
        self.pitch = float(pitch)
        self.values = np.zeros(0)

    def ensure(self, rmax):
        need = int(np.floor(rmax / self.pitch)) + 2
        have = self.values.size
        if need > have:
            grow = max(need, 2 * have, 64)
            r = np.arange(have, grow) * self.pitch
            self.values = np.concatenate([self.values, self.fn(r)])

    def __call__(self, r):
        r = np.asarray(r, dtype=np.float64)
        if r.size:
            self.ensure(float(np.max(r)))
        s = r / self.pitch
        k = np.floor(s).astype(np.int64)
        t = s - k
        return (1.0 - t) * self.values[k] + t * self.values[k + 1]


class MollifiedProfile:
    """``x -> sum_q w_q f(x - u_q/n)`` for a radially equivariant profile ``f``."""

    def __init__(self, base, config, memoize=True):
        self.base = base
        self.config = config
        self.nodes, self.weights = config.rule()
        self.lattice = RadialLattice(self._radial, 1.0 / (4.0 * config.n)) if memoize else None

    def direct(self, x, chunk=2048):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        shifts = self.nodes / self.config.n
        out = np.empty_like(x)
        for i in range(0, x.shape[0], chunk):
            xs = x[i:i + chunk]
            vals = self.base(xs[:, None, :] - shifts[None, :, :])
            out[i:i + chunk] = np.einsum("q,nqd->nd", self.weights, vals)
        return out

    def _radial(self, r):
        x = np.zeros((r.size, self.config.dim))
        x[:, 0] = r
        return self.direct(x)[:, 0]

    def __call__(self, x):
        if self.lattice is None:
            return self.direct(x)
        x = np.asarray(x, dtype=np.float64)
        r = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
        phi = self.lattice(r[..., 0])[..., None]
        return np.where(r > 0, x * (phi / np.where(r > 0, r, 1.0)), 0.0)


# ------------------------------------------------------------ components

@dataclass(frozen=True, eq=False)
class Drift:
    """``b(x, y) = x_part(x) + y @ K.T``; kinds: zero, linear, attraction, osgood."""

    kind: str
    dim: int
    B1: np.ndarray = None
    B2: np.ndarray = None
    c: np.ndarray = None
    kappa: float = 0.0
    profile: MollifiedProfile = None  # set when the osgood part is mollified

    @classmethod
    def zero(cls, dim):
        return cls("zero", dim)

    @classmethod
    def linear(cls, B1, B2, c=None):
        B1 = np.atleast_2d(np.asarray(B1, dtype=np.float64))
        B2 = np.atleast_2d(np.asarray(B2, dtype=np.float64))
        d = B1.shape[0]
        c = np.zeros(d) if c is None else np.atleast_1d(np.asarray(c, dtype=np.float64))
        if B1.shape != (d, d) or B2.shape != (d, d) or c.shape != (d,):
            raise InvalidInputError("linear drift needs d x d matrices and a d-vector")
        return cls("linear", d, B1, B2, c)

    @classmethod
    def attraction(cls, dim, kappa):
        return cls("attraction", dim, kappa=float(kappa))

    @classmethod
    def osgood(cls, dim, kappa=0.0):
        return cls("osgood", dim, kappa=float(kappa))

    @property
    def y_matrix(self):
        if self.kind == "linear":
            return self.B2
        return self.kappa * np.eye(self.dim)

    @property
    def law_dependent(self):
        return bool(np.any(self.y_matrix != 0))

    def x_part(self, x):
        if self.kind == "zero":
            return np.zeros_like(x)
        if self.kind == "linear":
            return x @ self.B1.T + self.c
        if self.kind == "attraction":
            return -self.kappa * x
        if self.profile is not None:
            return self.profile(x)
        return osgood_profile(x)

    def to_dict(self):
        d = {"kind": self.kind, "kappa": self.kappa}
        if self.kind == "linear":
            d.update(B1=self.B1.tolist(), B2=self.B2.tolist(), c=self.c.tolist())
        if self.profile is not None:
            d["mollifier_n"] = self.profile.config.n
        return d


@dataclass(frozen=True, eq=False)
class Diffusion:
    """``sigma(x, y) = S0 + alpha diag(x) + beta diag(y)``; kinds: zero, constant, linear."""

    kind: str
    dim: int
    S0: np.ndarray = None
    alpha: float = 0.0
    beta: float = 0.0

    @classmethod
    def zero(cls, dim):
        return cls("zero", dim, np.zeros((dim, dim)))

    @classmethod
    def constant(cls, S0):
        S0 = np.atleast_2d(np.asarray(S0, dtype=np.float64))
        if S0.shape[0] != S0.shape[1]:
            raise InvalidInputError("diffusion matrix must be square")
        return cls("constant", S0.shape[0], S0)

    @classmethod
    def linear(cls, S0, alpha, beta):
        S0 = np.atleast_2d(np.asarray(S0, dtype=np.float64))
        return cls("linear", S0.shape[0], S0, float(alpha), float(beta))

    @property
    def law_dependent(self):
        return self.beta != 0.0

    def field(self, x, ybar):
        """``sigma`` at rows of ``x`` with law variable replaced by ``ybar`` (n, d) or (d,)."""
        n = x.shape[0]
        out = np.broadcast_to(self.S0, (n, self.dim, self.dim)).copy()
        if self.kind == "linear":
            idx = np.arange(self.dim)
            out[:, idx, idx] += self.alpha * x + self.beta * np.broadcast_to(ybar, x.shape)
        return out

    def apply(self, x, ybar, dw):
        """``sigma(x, ybar) @ dw`` row by row without forming the matrices."""
        out = dw @ self.S0.T
        if self.kind == "linear":
            out = out + (self.alpha * x + self.beta * np.broadcast_to(ybar, x.shape)) * dw
        return out

    def to_dict(self):
        return {"kind": self.kind, "S0": self.S0.tolist(), "alpha": self.alpha, "beta": self.beta}


@dataclass(frozen=True, eq=False)
class Jump:
    """``G(x, y, z) = (c + a x + b y) * z``, marks of dimension 1 (broadcast) or d."""

    kind: str
    dim: int
    c: np.ndarray = None
    a: float = 0.0
    b: float = 0.0

    @classmethod
    def zero(cls, dim):
        return cls("zero", dim, np.zeros(dim))

    @classmethod
    def affine(cls, c, a=0.0, b=0.0):
        c = np.atleast_1d(np.asarray(c, dtype=np.float64))
        return cls("affine", c.size, c, float(a), float(b))

    @property
    def law_dependent(self):
        return self.b != 0.0

    def amplitude(self, x, ybar):
        """``g = c + a x + b ybar`` with shape (n, d)."""
        if self.kind == "zero":
            return np.zeros_like(x)
        return self.c + self.a * x + self.b * np.broadcast_to(ybar, x.shape)

    def to_dict(self):
        return {"kind": self.kind, "c": self.c.tolist(), "a": self.a, "b": self.b}


def apply_marks(g, z):
    """``g * z`` with ``z`` of shape (n, 1) or (n, d)."""
    return g * z


# ---------------------------------------------------------------- kernel

@dataclass(frozen=True, eq=False)
class CoefficientKernel:
    dim: int
    drift: Drift
    diffusion: Diffusion
    jump: Jump
    growth: float = 1.0
    modulus_rho: str = "linear"
    modulus_phi: str = "linear"
    modulus_L2: float = None
    truncation: float = None

    def __post_init__(self):
        for part in (self.drift, self.diffusion, self.jump):
            if part.dim != self.dim:
                raise InvalidInputError("kernel components disagree on the dimension")
        modulus(self.modulus_rho, 0.0)
        modulus(self.modulus_phi, 0.0)
        if not self.growth > 0:
            raise InvalidInputError("declared growth constant L1 must be positive")

    @property
    def law_dependent(self):
        return self.drift.law_dependent or self.diffusion.law_dependent or self.jump.law_dependent

    # two-point evaluations (rows of x and y pair up; broadcasting allowed)
    def drift_at(self, x, y):
        x, y = np.broadcast_arrays(np.atleast_2d(x), np.atleast_2d(y))
        return self.drift.x_part(_clamp(x, self.truncation)) + y @ self.drift.y_matrix.T

    def diffusion_at(self, x, y):
        x, y = np.broadcast_arrays(np.atleast_2d(x), np.atleast_2d(y))
        return self.diffusion.field(_clamp(x, self.truncation), y)

    def jump_at(self, x, y, z):
        x, y = np.broadcast_arrays(np.atleast_2d(x), np.atleast_2d(y))
        return apply_marks(self.jump.amplitude(_clamp(x, self.truncation), y), np.atleast_2d(z))

    # mean-field fast paths (exact because the kernel is affine in y)
    def drift_field(self, x, ybar):
        return self.drift.x_part(_clamp(x, self.truncation)) + ybar @ self.drift.y_matrix.T

    def diffusion_field(self, x, ybar):
        return self.diffusion.field(_clamp(x, self.truncation), ybar)

    def diffusion_apply(self, x, ybar, dw):
        return self.diffusion.apply(_clamp(x, self.truncation), ybar, dw)

    def jump_amplitude(self, x, ybar):
        return self.jump.amplitude(_clamp(x, self.truncation), ybar)

    def to_dict(self):
        return {
            "dim": self.dim, "drift": self.drift.to_dict(), "diffusion": self.diffusion.to_dict(),
            "jump": self.jump.to_dict(), "growth": self.growth, "modulus_rho": self.modulus_rho,
            "modulus_phi": self.modulus_phi, "modulus_L2": self.modulus_L2, "truncation": self.truncation,
        }


def mean_field_drift(kernel, x, mu):
    """``b[x, mu] = sum_i w_i b(x, y_i)`` for one point ``x``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    vals = kernel.drift_at(np.broadcast_to(x, mu.points.shape), mu.points)
    return mu.weights @ vals


def mean_field_diffusion(kernel, x, mu):
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    vals = kernel.diffusion_at(np.broadcast_to(x, mu.points.shape), mu.points)
    return np.einsum("i,ijk->jk", mu.weights, vals)


def mean_field_jump(kernel, x, mu, z):
    """``G[x, mu, z] = sum_i w_i G(x, y_i, z)``."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    vals = kernel.jump_at(np.broadcast_to(x, mu.points.shape), mu.points, np.broadcast_to(z, (mu.size, z.size)))
    return mu.weights @ vals


# ------------------------------------------------- mollify and truncate

def mollify(kernel, config, memoize=True):
    """Convolve the kernel with J^n in both arguments.

    Affine parts are fixed points of the convolution (J^n is even with unit
    mass), so only the nonlinear osgood profile is actually smoothed; it is
    evaluated by the configured quadrature and memoized on a radial lattice
    of pitch ``1/(4n)``.
    """
    if not isinstance(config, MollifierConfig):
        config = MollifierConfig(int(config), kernel.dim)
    if config.dim != kernel.dim:
        raise ConfigurationError("mollifier dimension differs from the kernel dimension")
    config.rule()  # budget check up front
    drift = kernel.drift
    if drift.kind == "osgood":
        base = drift.profile.base if drift.profile is not None else osgood_profile
        drift = replace(drift, profile=MollifiedProfile(base, config, memoize=memoize))
    return replace(kernel, drift=drift)


def truncate(kernel, level):
    """Clamp the state argument radially to the ball of radius ``level``."""
    if not level > 0:
        raise InvalidInputError("truncation level must be positive")
    return replace(kernel, truncation=float(level))


# ------------------------------------------------------------ validators

@dataclass
class ModulusReport:
    samples: int
    drift_ratio: float
    jump_ratio: float
    declared_L2: float
    violation: bool
    worst_distance: float


def modulus_check(kernel, sample_budget=10_000, seed=0, levy=None, radius=2.0, max_gap=E_INV,
                  cloud_size=4):
    """Largest observed ratio of the one-sided modulus to ``rho(|x-x'|^2) + rho(W2^2)``.

    Distances ``|x - x'|`` and the law perturbation are drawn log-uniform
    in ``[1e-6, max_gap]`` to probe small scales. The jump analogue uses
    ``phi`` and needs ``levy`` (skipped when None).
    """
    rng = np.random.default_rng(seed)
    d = kernel.dim
    worst_b = worst_g = 0.0
    worst_dist = 0.0
    z_nodes = z_w = None
    if levy is not None and levy.total_mass > 0:
        z_nodes, z_w = levy.quadrature()
    for _ in range(sample_budget):
        x = rng.uniform(-radius, radius, d)
        dirn = rng.normal(size=d)
        dirn /= np.linalg.norm(dirn)
        xp = x + dirn * np.exp(rng.uniform(np.log(1e-6), np.log(max_gap)))
        cloud = rng.uniform(-radius, radius, (cloud_size, d))
        shift = rng.normal(size=(cloud_size, d))
        shift *= np.exp(rng.uniform(np.log(1e-6), np.log(max_gap))) / np.linalg.norm(shift, axis=1, keepdims=True)
        mu, mup = EmpiricalMeasure(cloud), EmpiricalMeasure(cloud + shift)
        w2 = wasserstein2(mu, mup, method="exact_1d" if d == 1 else "exact_assignment")
        dx2 = float(np.sum((x - xp) ** 2))
        m, mp = mu.mean()[None, :], mup.mean()[None, :]
        bx = kernel.drift_field(x[None, :], m)[0]
        bxp = kernel.drift_field(xp[None, :], mp)[0]
        sx = kernel.diffusion_field(x[None, :], m)[0]
        sxp = kernel.diffusion_field(xp[None, :], mp)[0]
        lhs = float((x - xp) @ (bx - bxp) + np.sum((sx - sxp) ** 2))
        den = float(modulus(kernel.modulus_rho, dx2) + modulus(kernel.modulus_rho, w2**2))
        r = 0.0 if lhs <= 0 else (np.inf if den == 0 else lhs / den)
        if r > worst_b:
            worst_b, worst_dist = r, np.sqrt(dx2)
        if z_nodes is not None:
            ga = kernel.jump_amplitude(x[None, :], m)
            gb = kernel.jump_amplitude(xp[None, :], mp)
            diff = apply_marks(ga, z_nodes) - apply_marks(gb, z_nodes)
            lhs_g = float(z_w @ np.sum(diff**2, axis=1))
            den_g = float(modulus(kernel.modulus_phi, dx2) + modulus(kernel.modulus_phi, w2**2))
            rg = 0.0 if lhs_g <= 0 else (np.inf if den_g == 0 else lhs_g / den_g)
            worst_g = max(worst_g, rg)
    declared = kernel.modulus_L2
    violation = declared is not None and max(worst_b, worst_g) > 1.05 * declared
    return ModulusReport(sample_budget, worst_b, worst_g, declared, bool(violation), worst_dist)


def growth_check(kernel, levy=None, samples=2000, seed=0, radius=10.0):
    """Largest sampled ratios for the two linear-growth bounds; compare with ``kernel.growth``."""
    rng = np.random.default_rng(seed)
    d = kernel.dim
    x = rng.uniform(-radius, radius, (samples, d))
    y = rng.uniform(-radius, radius, (samples, d))
    nx, ny = np.linalg.norm(x, axis=1), np.linalg.norm(y, axis=1)
    b = np.linalg.norm(kernel.drift_at(x, y), axis=1)
    s = np.sum(kernel.diffusion_at(x, y) ** 2, axis=(1, 2))
    if levy is not None and levy.total_mass > 0:
        nodes, w = levy.quadrature()
        g = kernel.jump.amplitude(_clamp(x, kernel.truncation), y)
        s = s + np.sum(g**2 * (w @ nodes**2 if nodes.shape[1] == d else (w @ nodes[:, 0] ** 2)), axis=1)
    ratio_b = float(np.max(b / (1 + nx + ny)))
    ratio_s = float(np.max(s / (1 + nx**2 + ny**2)))
    return {"drift_ratio": ratio_b, "noise_ratio": ratio_s, "declared_L1": kernel.growth,
            "ok": bool(max(ratio_b, ratio_s) <= kernel.growth)}
