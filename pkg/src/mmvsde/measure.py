"""Empirical measures, second moments and Wasserstein-2 distances."""

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .errors import InvalidInputError, UsageError

ASSIGNMENT_CAP = 512
EPS_START = 1.0
EPS_FINAL = 1e-3
MARGINAL_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class EmpiricalMeasure:
    """Weighted point cloud; ``points`` has shape (N, d)."""

    points: np.ndarray
    weights: np.ndarray = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.ndim != 2 or pts.shape[0] < 1:
            raise InvalidInputError("an empirical measure needs at least one point")
        if not np.all(np.isfinite(pts)):
            raise InvalidInputError("measure points must be finite")
        if self.weights is None:
            w = np.full(pts.shape[0], 1.0 / pts.shape[0])
            uniform = True
        else:
            w = np.asarray(self.weights, dtype=np.float64).ravel()
            if w.size != pts.shape[0]:
                raise InvalidInputError("weights and points differ in length")
            if np.any(w < 0) or not np.all(np.isfinite(w)):
                raise InvalidInputError("weights must be finite and nonnegative")
            if abs(w.sum() - 1.0) > 1e-12:
                raise InvalidInputError("weights must sum to 1")
            uniform = bool(np.all(w == w[0]))
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "_uniform", uniform)

    @property
    def size(self):
        return self.points.shape[0]

    @property
    def dim(self):
        return self.points.shape[1]

    @property
    def is_uniform(self):
        return self._uniform

    def mean(self):
        if self._uniform:
            return self.points.mean(axis=0)
        return self.weights @ self.points


def second_moment(mu):
    """``(sum_i w_i |x_i|^2)^(1/2)``."""
    return float(np.sqrt(mu.weights @ np.sum(mu.points**2, axis=1)))


def _sq_cost(x, y):
    c = np.sum(x**2, axis=1)[:, None] + np.sum(y**2, axis=1)[None, :] - 2.0 * x @ y.T
    return np.maximum(c, 0.0)


def _exact_1d(mu, nu):
    ix, iy = np.argsort(mu.points[:, 0], kind="stable"), np.argsort(nu.points[:, 0], kind="stable")
    x, wx = mu.points[ix, 0], mu.weights[ix]
    y, wy = nu.points[iy, 0], nu.weights[iy]
    if mu.is_uniform and nu.is_uniform and mu.size == nu.size:
        return float(np.sqrt(np.mean((x - y) ** 2)))
    # quantile coupling: walk the merged cumulative weights
    cx, cy = np.cumsum(wx), np.cumsum(wy)
    cx[-1] = cy[-1] = 1.0
    cuts = np.union1d(cx, cy)
    lo = np.concatenate([[0.0], cuts[:-1]])
    mass = cuts - lo
    keep = mass > 0
    mid = 0.5 * (lo + cuts)[keep]
    qi = np.minimum(np.searchsorted(cx, mid), x.size - 1)
    qj = np.minimum(np.searchsorted(cy, mid), y.size - 1)
    return float(np.sqrt(np.sum(mass[keep] * (x[qi] - y[qj]) ** 2)))


def _exact_assignment(mu, nu):
    cost = _sq_cost(mu.points, nu.points)
    r, c = linear_sum_assignment(cost)
    return float(np.sqrt(cost[r, c].mean()))


@dataclass(frozen=True)
class EntropicResult:
    value: float  # sqrt of the cost of the rounded (feasible) plan: an upper bound
    lower: float  # sqrt of a c-transformed dual objective: a lower bound
    gap: float
    eps: float
    iterations: int


def _soft_ctransform(f, cost, la, eps):
    """g_j = -eps log sum_i a_i exp((f_i - C_ij)/eps), so column marginals are exact."""
    return -eps * logsumexp((f[:, None] - cost) / eps + la[:, None], axis=0)


def _log_plan(f, g, cost, la, lb, eps):
    return (f[:, None] + g[None, :] - cost) / eps + la[:, None] + lb[None, :]


def _newton_polish(f, cost, a, b, la, lb, eps, tol, max_steps=100):
    # Damped Newton on the concave semi-dual Phi(f) = a.f + b.g(f).
    # Hessian is -(diag(r) - P diag(1/b) P^T)/eps, singular along constants;
    # the rank-one term 11^T/n pins that direction without moving the step.
    n = a.size

    def phi(ff):
        return a @ ff + b @ _soft_ctransform(ff, cost, la, eps)

    cur = phi(f)
    for _ in range(max_steps):
        g = _soft_ctransform(f, cost, la, eps)
        p = np.exp(_log_plan(f, g, cost, la, lb, eps))
        r = p.sum(axis=1)
        grad = a - r
        if np.sum(np.abs(grad)) < tol:
            return f, True
        hess = np.diag(r) - (p / b[None, :]) @ p.T + np.full((n, n), 1.0 / n)
        step = np.linalg.solve(hess, eps * grad)
        t = 1.0
        slope = grad @ step
        while t > 1e-10:
            trial = f + t * step
            val = phi(trial)
            if val >= cur + 1e-4 * t * slope:
                break
            t *= 0.5
        f, cur = trial, val
    return f, False


def entropic_w2(mu, nu, eps_start=EPS_START, eps_final=EPS_FINAL, tol=MARGINAL_TOL,
                sinkhorn_budget=100):
    """Entropic W2 with an eps-halving schedule.

    Each level runs Sinkhorn scaling sweeps (log domain) and, if they have
    not met the marginal tolerance within ``sinkhorn_budget`` sweeps,
    finishes with Newton steps on the semi-dual. The returned ``value`` and
    ``lower`` bracket the true W2, so ``gap`` is a certified error bound.
    """
    if mu.dim != nu.dim:
        raise UsageError("measures live in different dimensions")
    a, b = mu.weights, nu.weights
    cost = _sq_cost(mu.points, nu.points)
    la, lb = np.log(np.where(a > 0, a, 1e-300)), np.log(np.where(b > 0, b, 1e-300))
    f = np.zeros(a.size)
    g = np.zeros(b.size)
    schedule = []
    eps = eps_start
    while eps > eps_final * (1 + 1e-12):
        schedule.append(eps)
        eps *= 0.5
    schedule.append(eps_final)
    total = 0
    for eps in schedule:
        done = False
        for _ in range(sinkhorn_budget):
            f = -eps * logsumexp((g[None, :] - cost) / eps + lb[None, :], axis=1)
            g = _soft_ctransform(f, cost, la, eps)
            total += 1
            row = np.exp(logsumexp(_log_plan(f, g, cost, la, lb, eps), axis=1))
            if np.sum(np.abs(row - a)) < tol:
                done = True
                break
        if not done:
            f, _ = _newton_polish(f, cost, a, b, la, lb, eps, tol)
            g = _soft_ctransform(f, cost, la, eps)
    plan = _round_to_marginals(np.exp(_log_plan(f, g, cost, la, lb, eps)), a, b)
    primal = float(np.sum(plan * cost))
    gt = np.min(cost - f[:, None], axis=0)
    dual = float(a @ f + b @ gt)
    upper = np.sqrt(max(primal, 0.0))
    lower = np.sqrt(max(min(dual, primal), 0.0))
    return EntropicResult(upper, lower, upper - lower, schedule[-1], total)


def _round_to_marginals(plan, a, b):
    """Project a nearly feasible plan onto the transport polytope (Altschuler et al. rounding)."""
    row = plan.sum(axis=1)
    plan = plan * np.minimum(1.0, a / np.where(row > 0, row, 1.0))[:, None]
    col = plan.sum(axis=0)
    plan = plan * np.minimum(1.0, b / np.where(col > 0, col, 1.0))[None, :]
    ea = a - plan.sum(axis=1)
    eb = b - plan.sum(axis=0)
    s = ea.sum()
    if s > 0:
        plan = plan + np.outer(ea, eb) / s
    return plan


def wasserstein2(mu, nu, method=None, cap=ASSIGNMENT_CAP):
    """W2 between two empirical measures.

    ``method`` is ``exact_1d``, ``exact_assignment`` or ``entropic``. When
    omitted: exact_1d in one dimension, exact_assignment for equal-size
    uniform clouds up to ``cap`` points, entropic otherwise.
    """
    if mu.dim != nu.dim:
        raise UsageError("measures live in different dimensions")
    assignable = mu.is_uniform and nu.is_uniform and mu.size == nu.size
    if method is None:
        if mu.dim == 1:
            method = "exact_1d"
        elif assignable and mu.size <= cap:
            method = "exact_assignment"
        else:
            method = "entropic"
    if method == "exact_1d":
        if mu.dim != 1:
            raise UsageError("exact_1d requires d = 1")
        return _exact_1d(mu, nu)
    if method == "exact_assignment":
        if not assignable:
            raise UsageError("exact_assignment requires equal-size uniform measures")
        if mu.size > cap:
            raise UsageError(f"exact_assignment is capped at {cap} points")
        return _exact_assignment(mu, nu)
    if method == "entropic":
        return entropic_w2(mu, nu).value
    raise UsageError(f"unknown W2 method {method!r}")


def coupling_upper_bound(xs, ys):
    """``((1/N) sum |x_i - y_i|^2)^(1/2)``; dominates W2 of the two empirical laws."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if xs.ndim == 1:
        xs = xs[:, None]
    if ys.ndim == 1:
        ys = ys[:, None]
    if xs.shape != ys.shape:
        raise UsageError("paired samples must have equal lengths")
    return float(np.sqrt(np.mean(np.sum((xs - ys) ** 2, axis=1))))
