"""Smooth minimization under box bounds and linear equality constraints.

The method is a spectral projected-gradient scheme: Barzilai-Borwein step
lengths, Euclidean projection onto the feasible set, and a monotone Armijo
line search along the projection arc.  Accepted iterates therefore never
increase the objective, and the returned point is feasible to projection
accuracy.  Per-point stage problems are tiny (tens of variables), which is
the regime this solver is tuned for.

Also houses the spherical parameterization used to keep normal vectors on
the unit sphere during optimization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import Infeasible, NumericalFailure


class SolveStatus(Enum):
    CONVERGED = "converged"           # projected-gradient norm under tolerance
    ITERATION_LIMIT = "iteration_limit"
    STALLED = "stalled"               # line search could not make progress


@dataclass
class ConstrainedProblem:
    """Objective with gradient, box bounds and linear equality constraints.

    ``func(x)`` must return ``(value, gradient)``.  ``equalities`` is a list
    of ``(coefficients, rhs)`` pairs meaning ``coefficients @ x == rhs``.
    Bounds may contain ``+-inf``.
    """

    dim: int
    func: callable
    lower: np.ndarray = None
    upper: np.ndarray = None
    equalities: list = field(default_factory=list)
    grad_tol: float = 1e-4
    max_iter: int = 500

    def __post_init__(self):
        if self.lower is None:
            self.lower = np.full(self.dim, -np.inf)
        if self.upper is None:
            self.upper = np.full(self.dim, np.inf)
        self.lower = np.asarray(self.lower, dtype=np.float64).reshape(self.dim)
        self.upper = np.asarray(self.upper, dtype=np.float64).reshape(self.dim)
        if (self.lower > self.upper).any():
            raise Infeasible("lower bound exceeds upper bound")
        eqs = []
        for a, b in self.equalities:
            a = np.asarray(a, dtype=np.float64).reshape(self.dim)
            if not np.isfinite(a).all():
                raise Infeasible("equality row has non-finite coefficients")
            eqs.append((a, float(b)))
        self.equalities = eqs


def _project_knapsack(y, lo, hi, rhs):
    """Project y onto {lo <= x <= hi, sum(x) = rhs} (unit-coefficient row).

    The map ``nu -> sum(clip(y - nu, lo, hi))`` is piecewise linear and
    decreasing; evaluating it at every breakpoint locates the segment that
    crosses ``rhs``, and linear interpolation inside the segment is exact.
    """
    if lo.sum() - rhs > 1e-9 or rhs - hi.sum() > 1e-9:
        raise Infeasible("equality constraint incompatible with bounds")
    nus = np.unique(np.concatenate([y - hi, y - lo]))
    vals = np.clip(y[None, :] - nus[:, None], lo, hi).sum(axis=1)
    idx = int(np.searchsorted(-vals, -rhs))
    if idx == 0:
        nu = nus[0]
    elif idx >= len(nus):
        nu = nus[-1]
    else:
        v0, v1 = vals[idx - 1], vals[idx]
        t = 0.0 if v1 == v0 else (v0 - rhs) / (v0 - v1)
        nu = nus[idx - 1] + t * (nus[idx] - nus[idx - 1])
    return np.clip(y - nu, lo, hi)


def _disjoint_unit_rows(problem):
    """True when equality rows have 0/1 coefficients and disjoint supports."""
    seen = np.zeros(problem.dim, dtype=bool)
    for a, _ in problem.equalities:
        on = a != 0.0
        if not np.all((a[on] == 1.0)):
            return False
        if (seen & on).any():
            return False
        seen |= on
    return True


def project_feasible(problem: ConstrainedProblem, y):
    """Euclidean projection of ``y`` onto the problem's feasible set."""
    y = np.asarray(y, dtype=np.float64).copy()
    if not problem.equalities:
        return np.clip(y, problem.lower, problem.upper)
    if _disjoint_unit_rows(problem):
        x = np.clip(y, problem.lower, problem.upper)
        for a, b in problem.equalities:
            on = a != 0.0
            x[on] = _project_knapsack(y[on], problem.lower[on], problem.upper[on], b)
        return x
    return _project_dykstra(problem, y)


def _project_dykstra(problem, y, iters=2000, tol=1e-13):
    """General fallback: Dykstra alternation between the box and the affine set."""
    A = np.array([a for a, _ in problem.equalities])
    b = np.array([v for _, v in problem.equalities])
    AAt = A @ A.T
    try:
        AAt_inv = np.linalg.inv(AAt)
    except np.linalg.LinAlgError:
        AAt_inv = np.linalg.pinv(AAt)
    xb = y.copy()
    xa = y.copy()
    p = np.zeros_like(y)
    q = np.zeros_like(y)
    for _ in range(iters):
        z = xb + p
        xa = z - A.T @ (AAt_inv @ (A @ z - b))
        p = z - xa
        z = xa + q
        xb_new = np.clip(z, problem.lower, problem.upper)
        q = z - xb_new
        done = np.abs(xb_new - xa).max() < tol
        xb = xb_new
        if done:
            break
    # Return the affine-exact iterate; at convergence it violates the box by
    # at most the tolerance, which the final clip removes.
    return np.clip(xa, problem.lower, problem.upper)


def _eval(problem, x):
    f, g = problem.func(x)
    f = float(f)
    g = np.asarray(g, dtype=np.float64).reshape(problem.dim)
    if not math.isfinite(f) or not np.isfinite(g).all():
        raise NumericalFailure("non-finite objective or gradient at a feasible point")
    return f, g


def minimize(problem: ConstrainedProblem, x0):
    """Minimize the problem from ``x0``; returns ``(x, f, status)``.

    ``x0`` is projected onto the feasible set first, so any starting point a
    caller can produce is acceptable.  The objective value never increases
    across accepted iterates.
    """
    x = project_feasible(problem, np.asarray(x0, dtype=np.float64))
    f, g = _eval(problem, x)
    alpha = 1.0
    status = SolveStatus.ITERATION_LIMIT
    for _ in range(problem.max_iter):
        pg = project_feasible(problem, x - g) - x
        if np.abs(pg).max() <= problem.grad_tol:
            status = SolveStatus.CONVERGED
            break
        d = project_feasible(problem, x - alpha * g) - x
        gd = float(g @ d)
        if gd > -1e-18:
            # Direction carries no descent at this step length; retry with the
            # unscaled projection arc before giving up.
            d = pg
            gd = float(g @ d)
            if gd > -1e-18:
                status = SolveStatus.CONVERGED if np.abs(pg).max() <= problem.grad_tol \
                    else SolveStatus.STALLED
                break
        step = 1.0
        accepted = False
        for _ in range(40):
            x_new = x + step * d
            f_new, g_new = _eval(problem, x_new)
            if f_new <= f + 1e-4 * step * gd:
                accepted = True
                break
            step *= 0.5
        if not accepted or f_new > f:
            status = SolveStatus.STALLED
            break
        s = x_new - x
        yv = g_new - g
        sy = float(s @ yv)
        ss = float(s @ s)
        alpha = min(max(ss / sy, 1e-8), 1e8) if sy > 1e-18 else 1.0
        x, f, g = x_new, f_new, g_new
    return x, f, status


def check_gradient(problem: ConstrainedProblem, x, h=1e-6):
    """Max relative error of the analytic gradient against central differences."""
    x = np.asarray(x, dtype=np.float64)
    _, g = _eval(problem, x)
    worst = 0.0
    for i in range(problem.dim):
        xp = x.copy(); xp[i] += h
        xm = x.copy(); xm[i] -= h
        fd = (problem.func(xp)[0] - problem.func(xm)[0]) / (2.0 * h)
        worst = max(worst, abs(g[i] - fd) / (1.0 + abs(g[i])))
    return worst


# ---------------------------------------------------------------------------
# Spherical parameterization of unit normals
# ---------------------------------------------------------------------------

@dataclass
class SphericalNormal:
    """Angles ``(u, v)``; ``embed`` is a unit vector by construction."""

    u: float
    v: float

    def embed(self):
        su = math.sin(self.u)
        return np.array([su * math.cos(self.v), su * math.sin(self.v),
                         math.cos(self.u)])


def sph_embed(u, v):
    """Unit vector for angles ``(u, v)``; works on scalars and arrays."""
    su, cu = np.sin(u), np.cos(u)
    sv, cv = np.sin(v), np.cos(v)
    return np.stack([su * cv, su * sv, cu], axis=-1)


def sph_jacobian(u, v):
    """Partials of :func:`sph_embed` with respect to ``u`` and ``v``."""
    su, cu = np.sin(u), np.cos(u)
    sv, cv = np.sin(v), np.cos(v)
    du = np.stack([cu * cv, cu * sv, -su], axis=-1)
    dv = np.stack([-su * sv, su * cv, np.zeros_like(su)], axis=-1)
    return du, dv


def equator_frame(n0):
    """Rotation ``R`` with ``R @ n0 = x_hat``.

    Parameterizing a normal as ``R.T @ sph_embed(u, v)`` and starting at
    ``(u, v) = (pi/2, 0)`` keeps the optimization away from the poles of the
    spherical chart, where the ``v`` gradient vanishes.
    """
    n0 = np.asarray(n0, dtype=np.float64)
    n0 = n0 / np.linalg.norm(n0)
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(n0)))] = 1.0
    e2 = np.cross(helper, n0)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(n0, e2)
    return np.stack([n0, e2, e3])


def framed_normal(R, u, v):
    """Normal vector and its ``(u, v)`` partials in the rotated chart."""
    n = R.T @ sph_embed(u, v)
    du, dv = sph_jacobian(u, v)
    return n, R.T @ du, R.T @ dv
