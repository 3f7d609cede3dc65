"""Batched numerics for the local-planarity objectives.

Both the joint denoising stage and the later position-refinement stage
minimize, per point, the squared norm of the local covariance applied to the
point normal.  Holding the neighbors of a sweep frozen, the minimization in
the offset is an exact quartic polynomial and the minimization in the normal
is an exact smallest-eigenvector problem, so a sweep can be executed for all
points at once with closed-form coordinate steps.
"""

from __future__ import annotations

import numpy as np


def neighbor_csr(neighbor_lists):
    """Flatten ragged neighbor lists into (rows, cols, indptr)."""
    counts = np.array([len(nb) for nb in neighbor_lists], dtype=np.intp)
    indptr = np.concatenate([[0], np.cumsum(counts)])
    cols = (np.concatenate(neighbor_lists) if counts.sum()
            else np.empty(0, dtype=np.intp)).astype(np.intp)
    rows = np.repeat(np.arange(len(neighbor_lists), dtype=np.intp), counts)
    return rows, cols, indptr, counts


def segment_sum(values, rows, n):
    """Sum pair values into per-point slots (works for (m,) and (m, k) values)."""
    if values.ndim == 1:
        return np.bincount(rows, weights=values, minlength=n)
    out = np.empty((n,) + values.shape[1:], dtype=np.float64)
    flat = values.reshape(len(values), -1)
    for c in range(flat.shape[1]):
        out.reshape(n, -1)[:, c] = np.bincount(rows, weights=flat[:, c], minlength=n)
    return out


def real_cubic_roots(c3, c2, c1, c0):
    """Real roots of ``c3 x^3 + c2 x^2 + c1 x + c0`` per row; NaN-padded (n, 3).

    ``c3`` must be nonzero.  Uses Cardano / trigonometric branches.
    """
    c3 = np.asarray(c3, dtype=np.float64)
    b = c2 / c3
    c = c1 / c3
    d = c0 / c3
    p = c - b * b / 3.0
    q = 2.0 * b**3 / 27.0 - b * c / 3.0 + d
    shift = -b / 3.0
    disc = (q / 2.0) ** 2 + (p / 3.0) ** 3
    roots = np.full(c3.shape + (3,), np.nan)

    one = disc > 0
    if one.any():
        s = np.sqrt(disc[one])
        t1 = np.cbrt(-q[one] / 2.0 + s) + np.cbrt(-q[one] / 2.0 - s)
        roots[one, 0] = t1 + shift[one]

    three = ~one
    if three.any():
        pp = p[three]
        qq = q[three]
        m = np.sqrt(np.maximum(-pp / 3.0, 0.0))
        denom = 2.0 * pp * np.where(m == 0, 1.0, m)
        with np.errstate(divide="ignore", invalid="ignore"):
            arg = np.clip(3.0 * qq / np.where(denom == 0, 1.0, denom),
                          -1.0, 1.0)
        arg = np.where(pp == 0, 0.0, arg)
        theta = np.arccos(arg) / 3.0
        for k in range(3):
            roots[three, k] = (2.0 * m * np.cos(theta - 2.0 * np.pi * k / 3.0)
                               + shift[three])
    return roots


def eps_objective_terms(base, normals, rows, cols, n):
    """Per-point quartic coefficients of the offset objective.

    With frozen neighbor positions, ``M n = A + eps*B + eps^2*C`` where
    ``A = sum_j b_j (b_j . n)``, ``B = S + T n`` (``S = sum_j b_j``,
    ``T = sum_j b_j . n``) and ``C = k n``.  Returns the dot products needed
    to assemble the quartic ``|M n|^2``.
    """
    nrow = normals[rows]
    beta = (base * nrow).sum(axis=1)
    A = segment_sum(base * beta[:, None], rows, n)
    S = segment_sum(base, rows, n)
    T = segment_sum(beta, rows, n)
    k = np.bincount(rows, minlength=n).astype(np.float64)
    An = (A * normals).sum(axis=1)
    Sn = (S * normals).sum(axis=1)
    AS = (A * S).sum(axis=1)
    AA = (A * A).sum(axis=1)
    SS = (S * S).sum(axis=1)
    return dict(A=A, S=S, T=T, k=k, An=An, Sn=Sn, AS=AS, AA=AA, SS=SS)


def best_eps(base, normals, rows, cols, n, xi, lo, hi):
    """Exact minimizer of ``|M(eps) n|^2 + xi eps^2`` per point, within bounds.

    Solves the cubic stationarity condition in closed form and compares all
    real stationary points with the interval endpoints.
    """
    t = eps_objective_terms(base, normals, rows, cols, n)
    A2, AB = t["AA"], t["AS"] + t["T"] * t["An"]
    BB = t["SS"] + 2.0 * t["T"] * t["Sn"] + t["T"] ** 2
    AC = t["k"] * t["An"]
    BC = t["k"] * (t["Sn"] + t["T"])
    CC = t["k"] ** 2

    # f(e) = A2 + 2 AB e + (BB + 2 AC + xi) e^2 + 2 BC e^3 + CC e^4
    q2 = BB + 2.0 * AC + xi
    c3 = 4.0 * CC
    c2 = 6.0 * BC
    c1 = 2.0 * q2
    c0 = 2.0 * AB

    active = t["k"] > 0
    cand = np.full((n, 5), np.nan)
    safe_c3 = np.where(active & (c3 > 0), c3, 1.0)
    roots = real_cubic_roots(safe_c3, c2, c1, c0)
    cand[:, :3] = np.clip(roots, lo, hi)
    cand[:, 3] = lo
    cand[:, 4] = hi

    def f(e):
        return A2[:, None] + 2 * AB[:, None] * e + q2[:, None] * e**2 \
            + 2 * BC[:, None] * e**3 + CC[:, None] * e**4

    vals = np.where(np.isnan(cand), np.inf, f(np.nan_to_num(cand)))
    eps = cand[np.arange(n), vals.argmin(axis=1)]
    eps = np.where(active, eps, 0.0)
    return eps


def smallest_eigvec(covs, prev=None):
    """Batched smallest eigenvector of symmetric PSD (n, 3, 3) matrices.

    When ``prev`` normals are given, the sign of each eigenvector is chosen
    to keep the orientation of the previous normal.
    """
    _, vecs = np.linalg.eigh(covs)
    n = vecs[:, :, 0]
    if prev is not None:
        sign = np.where((n * prev).sum(axis=1) < 0.0, -1.0, 1.0)
        n = n * sign[:, None]
    return n


def covariances(base, eps, normals, rows, n):
    """Per-point covariance sum of outer products at displaced positions."""
    d = base + eps[rows, None] * normals[rows]
    outer = d[:, :, None] * d[:, None, :]
    return segment_sum(outer, rows, n)


def planarity_objective(positions, eps, normals, rows, cols, n, xi):
    """Full coupled objective: sum_i |M^i n_i|^2 + xi sum_i eps_i^2."""
    disp = positions + eps[:, None] * normals
    d = disp[rows] - disp[cols]
    t = (d * normals[rows]).sum(axis=1)
    g = segment_sum(d * t[:, None], rows, n)
    return float((g * g).sum() + xi * (eps * eps).sum())


def frozen_point_gradients(base, eps, normals, rows, cols, n, xi,
                           with_normals=True):
    """Per-point gradient norms of the frozen-neighbor subproblems.

    ``base`` holds ``p_i - q_j`` with the neighbor snapshots ``q_j`` of the
    sweep.  Returns the per-point max of the offset partial and (optionally)
    the tangential normal partial; a point whose value is within the solver
    tolerance is already stationary for its own subproblem and keeps its
    state through the sweep.
    """
    nr = normals[rows]
    d = base + eps[rows, None] * nr
    t = (d * nr).sum(axis=1)
    g = segment_sum(d * t[:, None], rows, n)
    S = segment_sum(d, rows, n)
    T = segment_sum(t, rows, n)
    gn = (g * normals).sum(axis=1)
    grad_eps = 2.0 * (gn * T + (g * S).sum(axis=1)) + 2.0 * xi * eps
    score = np.abs(grad_eps)
    if with_normals:
        dot_dg = (d * g[rows]).sum(axis=1)
        Mg = segment_sum(d * dot_dg[:, None], rows, n)
        grad_n = 2.0 * ((eps * T)[:, None] * g + Mg)
        tangential = grad_n - (grad_n * normals).sum(axis=1)[:, None] * normals
        score = np.maximum(score, np.linalg.norm(tangential, axis=1))
    return score


def planarity_gradient_max(positions, eps, normals, rows, cols, n, xi,
                           with_normals=True):
    """Max-norm of the coupled objective gradient over all variables.

    Offsets contribute their plain partials; normals contribute the
    tangential component of the Euclidean partial, whose magnitude equals
    the gradient in any orthonormal spherical chart.  Both the own-term and
    the appearance of each point inside its neighbors' covariances are
    accounted for.
    """
    disp = positions + eps[:, None] * normals
    nr = normals[rows]
    d = disp[rows] - disp[cols]
    t = (d * nr).sum(axis=1)
    g = segment_sum(d * t[:, None], rows, n)          # M^i n_i
    S = segment_sum(d, rows, n)
    T = segment_sum(t, rows, n)
    gn = (g * normals).sum(axis=1)

    grad_eps = 2.0 * (gn * T + (g * S).sum(axis=1)) + 2.0 * xi * eps
    grow = g[rows]
    ncol = normals[cols]
    dot_ng = (ncol * grow).sum(axis=1)
    dot_dg = (d * grow).sum(axis=1)
    cross = -2.0 * (dot_ng * t + dot_dg * (ncol * nr).sum(axis=1))
    grad_eps = grad_eps + segment_sum(cross, cols, n)
    worst = np.abs(grad_eps).max() if n else 0.0

    if with_normals:
        Mg = segment_sum(d * dot_dg[:, None], rows, n)
        grad_n = 2.0 * ((eps * T)[:, None] * g + Mg)
        cross_n = -2.0 * eps[cols, None] * (t[:, None] * grow
                                            + dot_dg[:, None] * nr)
        grad_n = grad_n + segment_sum(cross_n, cols, n)
        tangential = grad_n - (grad_n * normals).sum(axis=1)[:, None] * normals
        worst = max(worst, float(np.linalg.norm(tangential, axis=1).max()))
    return float(worst)
