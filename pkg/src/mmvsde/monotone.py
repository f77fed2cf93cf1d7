"""Maximal monotone operators on R^d and their resolvents.

The catalog is closed: the zero operator, normal cones of convex domains,
monotone linear maps, and the sum of a normal cone with a linear map. Every
member is maximal monotone by construction, so the resolvent
``(I + lam A)^{-1}`` is defined everywhere and is a contraction.
"""

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import EmptySampleError, InvalidInputError, UsageError

BOUNDARY_TOL = 1e-9
DYKSTRA_TOL = 1e-12
DYKSTRA_MAX_ITER = 10_000


def _vec(a, name="point"):
    a = np.asarray(a, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise InvalidInputError(f"{name} has non-finite coordinates")
    return a


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ConvexDomain:
    """Closed convex set with nonempty interior.

    Build with :meth:`whole_space`, :meth:`box`, :meth:`ball` or
    :meth:`halfspaces`; the direct constructor does no validation.
    Halfspaces are ``{x : normals @ x <= offsets}`` with unit normals.
    """

    kind: str
    dim: int
    lower: np.ndarray = None
    upper: np.ndarray = None
    center: np.ndarray = None
    radius: float = None
    normals: np.ndarray = None
    offsets: np.ndarray = None
    witness: np.ndarray = None
    max_iter: int = DYKSTRA_MAX_ITER

    @classmethod
    def whole_space(cls, dim):
        if dim < 1:
            raise InvalidInputError("dimension must be >= 1")
        return cls("whole_space", int(dim))

    @classmethod
    def box(cls, lower, upper):
        lower = np.atleast_1d(np.asarray(lower, dtype=np.float64))
        upper = np.atleast_1d(np.asarray(upper, dtype=np.float64))
        if lower.shape != upper.shape or lower.ndim != 1:
            raise InvalidInputError("box bounds must be vectors of equal length")
        if np.any(np.isnan(lower)) or np.any(np.isnan(upper)):
            raise InvalidInputError("box bounds must not be NaN")
        if not np.all(lower < upper):
            raise InvalidInputError("box requires lower < upper componentwise")
        if np.any(lower == np.inf) or np.any(upper == -np.inf):
            raise InvalidInputError("box is empty")
        return cls("box", lower.size, lower=_frozen(lower), upper=_frozen(upper))

    @classmethod
    def ball(cls, center, radius):
        center = _vec(np.atleast_1d(center), "center")
        radius = float(radius)
        if not (np.isfinite(radius) and radius > 0):
            raise InvalidInputError("ball requires a finite radius > 0")
        return cls("ball", center.size, center=_frozen(center), radius=radius)

    @classmethod
    def halfspaces(cls, normals, offsets, witness, max_iter=DYKSTRA_MAX_ITER):
        normals = _vec(np.atleast_2d(normals), "normals")
        offsets = _vec(np.atleast_1d(offsets), "offsets")
        witness = _vec(np.atleast_1d(witness), "witness")
        if normals.shape[0] != offsets.size or normals.shape[1] != witness.size:
            raise InvalidInputError("halfspace normals/offsets/witness shapes disagree")
        norms = np.linalg.norm(normals, axis=1)
        if np.any(norms == 0):
            raise InvalidInputError("halfspace normal of zero length")
        normals = normals / norms[:, None]
        offsets = offsets / norms
        slack = offsets - normals @ witness
        if not np.all(slack > 1e-12):
            raise InvalidInputError("witness point is not strictly interior; the set is empty "
                                    "or has empty interior")
        return cls("halfspace_intersection", witness.size, normals=_frozen(normals),
                   offsets=_frozen(offsets), witness=_frozen(witness), max_iter=int(max_iter))

    def _check(self, points):
        p = _vec(points)
        if p.shape[-1] != self.dim:
            raise InvalidInputError(f"expected points of dimension {self.dim}, got {p.shape[-1]}")
        return p

    def project(self, points):
        """Euclidean projection; accepts a single point (d,) or a batch (n, d)."""
        p = self._check(points)
        single = p.ndim == 1
        p = np.atleast_2d(p)
        if self.kind == "whole_space":
            out = p.copy()
        elif self.kind == "box":
            out = np.clip(p, self.lower, self.upper)
        elif self.kind == "ball":
            v = p - self.center
            r = np.sqrt(np.sum(v * v, axis=1))
            scale = np.where(r > self.radius, self.radius / np.where(r > 0, r, 1.0), 1.0)
            out = np.where((r > self.radius)[:, None], self.center + v * scale[:, None], p)
        else:
            out = self._project_halfspaces(p)
        return out[0] if single else out

    def _project_halfspaces(self, p):
        if self.normals.shape[0] == 1:
            n, c = self.normals[0], self.offsets[0]
            viol = np.maximum(p @ n - c, 0.0)
            return p - viol[:, None] * n
        out, _, conv = _kernels.dykstra_project(
            np.ascontiguousarray(p), np.ascontiguousarray(self.normals),
            np.ascontiguousarray(self.offsets), DYKSTRA_TOL, self.max_iter)
        if not np.all(conv):
            # Dykstra hit the cap; the last iterate is still returned but is
            # pushed onto the feasible side of any violated face.
            viol = self.normals @ out.T - self.offsets[:, None]
            if np.any(viol > 1e-10):
                out = out - np.maximum(viol, 0).T @ self.normals
        return out

    def distance(self, points):
        p = self._check(points)
        return np.linalg.norm(np.atleast_2d(p) - np.atleast_2d(self.project(p)), axis=1).reshape(p.shape[:-1])

    def boundary_distance(self, points):
        """Distance to the boundary for points inside (0 on or outside the boundary)."""
        p = np.atleast_2d(self._check(points))
        if self.kind == "whole_space":
            out = np.full(p.shape[0], np.inf)
        elif self.kind == "box":
            with np.errstate(invalid="ignore"):
                gaps = np.concatenate([p - self.lower, self.upper - p], axis=1)
            gaps = np.where(np.isnan(gaps), np.inf, gaps)
            out = np.min(gaps, axis=1)
        elif self.kind == "ball":
            out = self.radius - np.linalg.norm(p - self.center, axis=1)
        else:
            out = np.min(self.offsets[None, :] - p @ self.normals.T, axis=1)
        out = np.maximum(out, 0.0)
        return out.reshape(np.shape(points)[:-1])

    def contains(self, points, tol=BOUNDARY_TOL):
        return self.distance(points) <= tol

    def interior_point(self):
        if self.kind == "whole_space":
            return np.zeros(self.dim)
        if self.kind == "box":
            lo = np.where(np.isfinite(self.lower), self.lower, np.where(np.isfinite(self.upper), self.upper - 2.0, -1.0))
            hi = np.where(np.isfinite(self.upper), self.upper, lo + 2.0)
            return 0.5 * (lo + hi)
        if self.kind == "ball":
            return np.array(self.center)
        return np.array(self.witness)

    def to_dict(self):
        d = {"kind": self.kind, "dim": self.dim}
        for key in ("lower", "upper", "center", "normals", "offsets", "witness"):
            v = getattr(self, key)
            if v is not None:
                d[key] = np.asarray(v).tolist()
        if self.radius is not None:
            d["radius"] = self.radius
        return d


@dataclass(frozen=True, eq=False)
class MonotoneOperator:
    """A member of the operator catalog.

    ``kind`` is one of ``zero``, ``normal_cone``, ``linear`` or ``sum``
    (normal cone plus linear map). ``domain`` is the closure of D(A).
    """

    kind: str
    domain: ConvexDomain
    matrix: np.ndarray = None
    _symmetric: bool = field(default=True, repr=False)

    @property
    def dim(self):
        return self.domain.dim

    @classmethod
    def zero(cls, dim):
        return cls("zero", ConvexDomain.whole_space(dim))

    @classmethod
    def normal_cone(cls, domain):
        return cls("normal_cone", domain)

    @classmethod
    def linear(cls, matrix):
        m = _check_monotone_matrix(matrix)
        return cls("linear", ConvexDomain.whole_space(m.shape[0]), _frozen(m), bool(np.allclose(m, m.T)))

    @classmethod
    def sum(cls, domain, matrix):
        m = _check_monotone_matrix(matrix)
        if m.shape[0] != domain.dim:
            raise InvalidInputError("matrix and domain dimensions disagree")
        return cls("sum", domain, _frozen(m), bool(np.allclose(m, m.T)))

    def resolvent(self, points, lam):
        """``(I + lam A)^{-1}`` applied to a point or a batch of points."""
        if not lam > 0:
            raise UsageError("resolvent requires lambda > 0")
        p = _vec(points)
        if p.shape[-1] != self.dim:
            raise InvalidInputError(f"expected points of dimension {self.dim}")
        single = p.ndim == 1
        p = np.atleast_2d(p)
        if self.kind == "zero":
            out = p.copy()
        elif self.kind == "normal_cone":
            out = self.domain.project(p)
        elif self.kind == "linear":
            a = np.eye(self.dim) + lam * self.matrix
            out = np.linalg.solve(a, p.T).T
        else:
            out = self._sum_resolvent(p, lam)
        return out[0] if single else out

    def _sum_resolvent(self, p, lam, tol=1e-13, max_iter=DYKSTRA_MAX_ITER):
        # Forward-backward splitting on y = P_C(y - tau((I + lam M) y - p)).
        # Each point stops on its own criterion so batching is irrelevant.
        a = np.eye(self.dim) + lam * self.matrix
        lip = np.linalg.norm(a, 2)
        tau = 2.0 / (1.0 + lip) if self._symmetric else 1.0 / lip**2
        y = self.domain.project(p)
        active = np.arange(p.shape[0])
        for _ in range(max_iter):
            ya = y[active]
            new = self.domain.project(ya - tau * (ya @ a.T - p[active]))
            step = np.linalg.norm(new - ya, axis=1)
            y[active] = new
            active = active[step > tol * (1.0 + np.linalg.norm(new, axis=1))]
            if active.size == 0:
                break
        return y

    def apply_linear(self, x):
        if self.matrix is None:
            return np.zeros_like(x)
        return x @ self.matrix.T

    def to_dict(self):
        d = {"kind": self.kind, "domain": self.domain.to_dict()}
        if self.matrix is not None:
            d["matrix"] = np.asarray(self.matrix).tolist()
        return d


def _check_monotone_matrix(matrix):
    m = _vec(np.atleast_2d(matrix), "matrix")
    if m.shape[0] != m.shape[1]:
        raise InvalidInputError("linear operator needs a square matrix")
    sym = 0.5 * (m + m.T)
    if np.min(np.linalg.eigvalsh(sym)) < -1e-12:
        raise InvalidInputError("linear operator must be monotone (positive semidefinite symmetric part)")
    return m


def project(domain, point):
    return domain.project(point)


def resolvent(op, lam, point):
    return op.resolvent(point, lam)


def graph_sample(op, count, radius, seed):
    """Sample ``count`` pairs ``(x, x*)`` from the graph of ``op`` with ``|x| <= radius``.

    Normal-cone pairs mix interior points (``x* = 0``) with boundary points
    produced by projecting an outside point ``p``; the residual ``p - P(p)``
    is an outward normal there and is rescaled at random. Returns two arrays
    of shape (count, d).
    """
    if count < 1 or not radius > 0:
        raise UsageError("graph_sample requires count >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    d = op.dim
    dom = op.domain

    def ball_points(k, r):
        g = rng.normal(size=(k, d))
        g /= np.linalg.norm(g, axis=1, keepdims=True)
        return g * (r * rng.uniform(size=(k, 1)) ** (1.0 / d))

    if op.kind in ("zero", "linear"):
        x = ball_points(count, radius)
        return x, op.apply_linear(x)

    if np.linalg.norm(dom.project(np.zeros(d))) > radius:
        raise EmptySampleError("radius is smaller than the distance from the origin to the domain")

    want_boundary = count // 2 if dom.kind != "whole_space" else 0
    xs, xstars = [], []
    n_bnd = n_int = 0
    for attempt in range(1000):
        if n_bnd < want_boundary:
            p = ball_points(4 * count, 2.0 * radius)
            x = dom.project(p)
            resid = p - x
            rn = np.linalg.norm(resid, axis=1)
            ok = (rn > BOUNDARY_TOL) & (np.linalg.norm(x, axis=1) <= radius)
            x, resid, rn = x[ok], resid[ok], rn[ok]
            take = min(want_boundary - n_bnd, x.shape[0])
            scale = rng.uniform(0.0, 1.0, size=(x.shape[0], 1)) * radius
            xs.append(x[:take])
            xstars.append((resid / rn[:, None] * scale)[:take])
            n_bnd += take
        if n_int < count - want_boundary:
            x = ball_points(4 * count, radius)
            ok = dom.boundary_distance(x) > BOUNDARY_TOL
            x = x[ok]
            take = min(count - want_boundary - n_int, x.shape[0])
            xs.append(x[:take])
            xstars.append(np.zeros((take, d)))
            n_int += take
        if n_bnd >= want_boundary and n_int >= count - want_boundary:
            break
        if n_bnd < want_boundary and attempt == 50:
            # the boundary is out of reach of the radius ball: use interior points only
            want_boundary = n_bnd
    if n_bnd + n_int < count:
        raise EmptySampleError("could not draw enough graph points inside the radius")
    x = np.concatenate(xs, axis=0)
    xstar = np.concatenate(xstars, axis=0)
    if op.kind == "sum":
        xstar = xstar + op.apply_linear(x)
    return x, xstar
