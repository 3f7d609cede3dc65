"""Stage 2: per-point transport cost and the edge-zone classifier.

The local distribution of unit normals around a point is matched against two
representative directions under a half-mass coupling: each neighbor may
split its unit of mass between the two representatives, but the totals must
balance.  The residual of the best match (the transport cost) is small both
in flat regions and exactly on a crease, while the angle between the two
representatives peaks on the crease; the classifier combines both signals.

Costs are reported as weighted means (the per-neighbor weights
``1 / (dist^2 + eps)`` are normalized to sum to one), which makes the
classifier threshold independent of neighborhood size and sampling density.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import NeighborQuery, OrientedCloud, PipelineConfig, PointLabel
from .solver import ConstrainedProblem, equator_frame, framed_normal, minimize

_TWO_MEANS_ITERS = 24


@dataclass
class OmtResult:
    cost: float
    n_hat1: np.ndarray
    n_hat2: np.ndarray
    lambdas: np.ndarray
    angle: float
    status: object = None


@dataclass
class EdgeZoneReport:
    """Per-point classifier output for a whole cloud."""

    cost: np.ndarray
    n_hat1: np.ndarray
    n_hat2: np.ndarray
    angle: np.ndarray
    lambdas: list
    classification: np.ndarray
    sparse: np.ndarray  # points with fewer than 4 neighbors

    def edge_zone_indices(self):
        return np.where(self.classification == PointLabel.EDGE_ZONE)[0]


def neighbor_weights(distances_sq, eps_denom, weighted=True):
    """Normalized inverse-square weights used by the transport objectives."""
    if weighted:
        w = 1.0 / (np.asarray(distances_sq, dtype=np.float64) + eps_denom)
    else:
        w = np.ones(len(distances_sq))
    return w / w.sum()


def omt_problem(neighbor_normals, weights, frames, grad_tol=1e-4):
    """Transport-cost problem over ``x = (u1, v1, u2, v2, lambda_1..k)``.

    ``weights`` must already be normalized.  The two representative normals
    live in rotated spherical charts given by ``frames``.
    """
    nn = np.asarray(neighbor_normals, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    k = len(nn)

    def func(x):
        lam = x[4:]
        reps = []
        jac = []
        for d in range(2):
            nd, du, dv = framed_normal(frames[d], x[2 * d], x[2 * d + 1])
            reps.append(nd)
            jac.append((du, dv))
        diff1 = nn - reps[0]
        diff2 = nn - reps[1]
        rho1 = (diff1 * diff1).sum(axis=1)
        rho2 = (diff2 * diff2).sum(axis=1)
        value = float((w * (lam * rho1 + (1.0 - lam) * rho2)).sum())
        grad = np.empty(4 + k)
        m1 = w * lam
        m2 = w * (1.0 - lam)
        grad[0] = -2.0 * float((m1[:, None] * diff1).sum(axis=0) @ jac[0][0])
        grad[1] = -2.0 * float((m1[:, None] * diff1).sum(axis=0) @ jac[0][1])
        grad[2] = -2.0 * float((m2[:, None] * diff2).sum(axis=0) @ jac[1][0])
        grad[3] = -2.0 * float((m2[:, None] * diff2).sum(axis=0) @ jac[1][1])
        grad[4:] = w * (rho1 - rho2)
        return value, grad

    lower = np.concatenate([np.full(4, -np.inf), np.zeros(k)])
    upper = np.concatenate([np.full(4, np.inf), np.ones(k)])
    eq_row = np.concatenate([np.zeros(4), np.ones(k)])
    return ConstrainedProblem(dim=4 + k, func=func, lower=lower, upper=upper,
                              equalities=[(eq_row, k / 2.0)], grad_tol=grad_tol)


def two_means(normals, iters=_TWO_MEANS_ITERS):
    """Deterministic 2-means on unit vectors, seeded with the farthest pair."""
    nn = np.asarray(normals, dtype=np.float64)
    k = len(nn)
    gram = nn @ nn.T
    flat = np.argmin(gram)
    i, j = divmod(flat, k)
    c1, c2 = nn[i].copy(), nn[j].copy()
    if float(c1 @ c2) > 1.0 - 1e-12:
        # Coincident seeds stall k-means; nudge one of them.
        c2 = _rotate_slightly(c2, 1e-3)
    for _ in range(iters):
        assign = (nn @ c1) >= (nn @ c2)
        new1 = nn[assign].sum(axis=0) if assign.any() else c1
        new2 = nn[~assign].sum(axis=0) if (~assign).any() else c2
        n1 = np.linalg.norm(new1)
        n2 = np.linalg.norm(new2)
        new1 = new1 / n1 if n1 > 1e-12 else c1
        new2 = new2 / n2 if n2 > 1e-12 else c2
        if float(new1 @ c1) > 1.0 - 1e-15 and float(new2 @ c2) > 1.0 - 1e-15:
            c1, c2 = new1, new2
            break
        c1, c2 = new1, new2
    return c1, c2


def _rotate_slightly(v, angle):
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(v)))] = 1.0
    axis = np.cross(v, helper)
    axis /= np.linalg.norm(axis)
    return v * math.cos(angle) + np.cross(axis, v) * math.sin(angle)


def _principal_split(normals):
    """Alternative seeding: split normals by the principal spread direction."""
    nn = np.asarray(normals, dtype=np.float64)
    centered = nn - nn.mean(axis=0)
    _, vecs = np.linalg.eigh(centered.T @ centered)
    axis = vecs[:, -1]
    side = (centered @ axis) >= 0.0
    if side.all() or not side.any():
        side[0] = not side[0]
    c1 = nn[side].sum(axis=0)
    c2 = nn[~side].sum(axis=0) if (~side).any() else -c1
    for c in (c1, c2):
        if np.linalg.norm(c) < 1e-12:
            c[:] = nn[0]
    return c1 / np.linalg.norm(c1), c2 / np.linalg.norm(c2)


def _half_mass_assignment(normals, weights, c1, c2, k):
    """Exact best lambda for fixed representatives (vertex of the polytope).

    The objective is linear in lambda, so the optimum assigns full mass by
    the weighted preference order, with at most one fractional entry when
    ``k`` is odd.
    """
    rho1 = ((normals - c1) ** 2).sum(axis=1)
    rho2 = ((normals - c2) ** 2).sum(axis=1)
    gain = weights * (rho1 - rho2)  # ascending gain prefers lambda = 1
    order = np.argsort(gain, kind="stable")
    lam = np.zeros(k)
    budget = k / 2.0
    for j in order:
        take = min(1.0, budget)
        lam[j] = take
        budget -= take
        if budget <= 0:
            break
    return lam


def _alternate(normals, weights, c1, c2, k, rounds=12):
    """Exact coordinate descent: half-mass assignment then weighted means."""
    prev = None
    for _ in range(rounds):
        lam = _half_mass_assignment(normals, weights, c1, c2, k)
        if prev is not None and np.array_equal(lam, prev):
            return c1, c2, lam
        prev = lam
        s1 = ((weights * lam)[:, None] * normals).sum(axis=0)
        s2 = ((weights * (1.0 - lam))[:, None] * normals).sum(axis=0)
        if np.linalg.norm(s1) > 1e-12:
            c1 = s1 / np.linalg.norm(s1)
        if np.linalg.norm(s2) > 1e-12:
            c2 = s2 / np.linalg.norm(s2)
    lam = _half_mass_assignment(normals, weights, c1, c2, k)
    return c1, c2, lam


def _evaluate(normals, weights, c1, c2, lam):
    rho1 = ((normals - c1) ** 2).sum(axis=1)
    rho2 = ((normals - c2) ** 2).sum(axis=1)
    return float((weights * (lam * rho1 + (1.0 - lam) * rho2)).sum())


def _seed_pairs(nn):
    """Representative-direction pairs to start the coordinate descent from.

    Small patches enumerate every normal pair; larger ones reduce to a
    farthest-point-sampled subset of directions first.  The objective is
    multimodal in the representatives, and the exact alternation is cheap
    enough that broad seeding is the reliable way to land in the best basin.
    """
    k = len(nn)
    if k <= 12:
        reps = nn
    else:
        picks = [0]
        dots = nn @ nn[0]
        for _ in range(7):
            nxt = int(np.argmin(dots))
            picks.append(nxt)
            dots = np.maximum(dots, nn @ nn[nxt])
        reps = nn[sorted(set(picks))]
    pairs = [(reps[i], reps[j])
             for i in range(len(reps)) for j in range(i + 1, len(reps))]
    pairs.append(two_means(nn))
    pairs.append(_principal_split(nn))
    return pairs


def _alternate_batch(nn, w, seeds1, seeds2, k, rounds=8):
    """Coordinate descent for many seed pairs at once.

    Uses the unit-vector identity ``|n - c|^2 = 2 - 2 n.c`` so every round
    is a handful of (seeds, k) array operations.  Returns the best
    ``(value, c1, c2, lam)`` over all seeds.
    """
    C1 = np.array(seeds1, dtype=np.float64)
    C2 = np.array(seeds2, dtype=np.float64)
    half = k // 2
    frac = 0.5 if k % 2 else None

    def assign(C1, C2):
        gain = w[None, :] * 2.0 * ((nn @ C2.T).T - (nn @ C1.T).T)  # rho1-rho2
        rank = np.argsort(np.argsort(gain, axis=1, kind="stable"),
                          axis=1, kind="stable")
        lam = (rank < half).astype(np.float64)
        if frac is not None:
            lam[rank == half] = frac
        return lam

    for _ in range(rounds):
        lam = assign(C1, C2)
        s1 = (w[None, :] * lam) @ nn
        s2 = (w[None, :] * (1.0 - lam)) @ nn
        n1 = np.linalg.norm(s1, axis=1, keepdims=True)
        n2 = np.linalg.norm(s2, axis=1, keepdims=True)
        C1 = np.where(n1 > 1e-12, s1 / np.where(n1 == 0, 1.0, n1), C1)
        C2 = np.where(n2 > 1e-12, s2 / np.where(n2 == 0, 1.0, n2), C2)
    lam = assign(C1, C2)
    rho1 = 2.0 - 2.0 * (nn @ C1.T).T
    rho2 = 2.0 - 2.0 * (nn @ C2.T).T
    values = (w[None, :] * (lam * rho1 + (1.0 - lam) * rho2)).sum(axis=1)
    best = int(values.argmin())
    return float(values[best]), C1[best], C2[best], lam[best]


def omt_cost_from_patch(neighbor_normals, distances_sq, config: PipelineConfig,
                        weighted=None) -> OmtResult:
    """Optimize the transport cost for one neighborhood patch."""
    nn = np.asarray(neighbor_normals, dtype=np.float64)
    k = len(nn)
    if k < 4:
        return OmtResult(np.inf, np.array([0.0, 0.0, 1.0]),
                         np.array([0.0, 0.0, 1.0]), np.zeros(k), 0.0)
    if weighted is None:
        weighted = config.weighted_omt
    w = neighbor_weights(distances_sq, config.eps_denom, weighted)

    pairs = _seed_pairs(nn)
    _, c1, c2, lam = _alternate_batch(
        nn, w, [p[0] for p in pairs], [p[1] for p in pairs], k)
    frames = (equator_frame(c1), equator_frame(c2))
    problem = omt_problem(nn, w, frames, grad_tol=config.grad_tol)
    x0 = np.concatenate([[math.pi / 2.0, 0.0, math.pi / 2.0, 0.0], lam])
    x, value, status = minimize(problem, x0)
    n1, _, _ = framed_normal(frames[0], x[0], x[1])
    n2, _, _ = framed_normal(frames[1], x[2], x[3])
    # The polished representatives may admit a better vertex assignment;
    # finishing with one exact coordinate pass never increases the cost.
    n1f, n2f, lamf = _alternate(nn, w, n1, n2, k, rounds=2)
    vf = _evaluate(nn, w, n1f, n2f, lamf)
    if vf <= value:
        value, n1, n2, lam = vf, n1f, n2f, lamf
    else:
        lam = x[4:]
    if tuple(n1) > tuple(n2):  # canonical order, swapping the coupling too
        n1, n2 = n2, n1
        lam = 1.0 - lam
    angle = float(np.arccos(np.clip(n1 @ n2, -1.0, 1.0)))
    return OmtResult(value, n1, n2, lam, angle, status)


def omt_cost(i, cloud: OrientedCloud, query: NeighborQuery,
             config: PipelineConfig, delta) -> OmtResult:
    """Transport cost of point ``i`` over its radius neighborhood."""
    nb = query.radius_of(i, config.radius_mult * delta)
    d2 = ((cloud.positions[nb] - cloud.positions[i]) ** 2).sum(axis=1)
    return omt_cost_from_patch(cloud.normals[nb], d2, config)


def classify(cost, angle, config: PipelineConfig) -> PointLabel:
    """Three-situation rule: flat, edge zone, or large-residual reject."""
    if angle <= config.angle_thresh:
        return PointLabel.OFF_EDGE
    if cost <= config.cost_thresh:
        return PointLabel.EDGE_ZONE
    return PointLabel.OFF_EDGE


def edge_zone_report(cloud: OrientedCloud, query: NeighborQuery,
                     config: PipelineConfig, delta) -> EdgeZoneReport:
    """Classify every point of the cloud.

    Patches whose normals all lie within the angle threshold of each other
    cannot produce representatives further apart than that threshold (both
    representatives are weighted means inside the cone), so they are
    classified off-edge without running the optimizer.
    """
    n = len(cloud)
    r = config.radius_mult * delta
    cost = np.zeros(n)
    n1 = np.zeros((n, 3))
    n2 = np.zeros((n, 3))
    angle = np.zeros(n)
    lambdas = [None] * n
    classification = np.full(n, PointLabel.OFF_EDGE, dtype=np.uint8)
    sparse = np.zeros(n, dtype=bool)
    cos_thresh = math.cos(config.angle_thresh)

    neighbor_lists = query.radius_of_many(np.arange(n), r)
    for i in range(n):
        nb = neighbor_lists[i]
        k = len(nb)
        if k < 4:
            cost[i] = np.inf
            sparse[i] = True
            m = cloud.normals[nb].sum(axis=0) if k else cloud.normals[i]
            m = m / max(np.linalg.norm(m), 1e-12)
            n1[i] = n2[i] = m
            lambdas[i] = np.zeros(k)
            continue
        nn = cloud.normals[nb]
        if (nn @ nn.T).min() > cos_thresh:
            w = neighbor_weights(((cloud.positions[nb] - cloud.positions[i]) ** 2
                                  ).sum(axis=1), config.eps_denom,
                                 config.weighted_omt)
            m = nn.sum(axis=0)
            m = m / max(np.linalg.norm(m), 1e-12)
            n1[i] = n2[i] = m
            cost[i] = float((w * ((nn - m) ** 2).sum(axis=1)).sum())
            lambdas[i] = np.full(k, 0.5)
            continue
        d2 = ((cloud.positions[nb] - cloud.positions[i]) ** 2).sum(axis=1)
        res = omt_cost_from_patch(nn, d2, config)
        cost[i] = res.cost
        n1[i] = res.n_hat1
        n2[i] = res.n_hat2
        angle[i] = res.angle
        lambdas[i] = res.lambdas
        classification[i] = classify(res.cost, res.angle, config)
    return EdgeZoneReport(cost, n1, n2, angle, lambdas, classification, sparse)


def profile_scan(cloud: OrientedCloud, query: NeighborQuery,
                 config: PipelineConfig, delta, probe_points,
                 signed_distances):
    """Transport cost and representative angle along a path of probe points.

    Each probe borrows the neighborhood of the cloud around it; no probe
    normal is involved.  Returns an array of rows
    ``(signed_distance, cost, angle)``.
    """
    r = config.radius_mult * delta
    rows = []
    for s, p in zip(signed_distances, probe_points):
        nb = query.radius_at(p, r)
        if len(nb) < 4:
            rows.append((float(s), np.inf, 0.0))
            continue
        d2 = ((cloud.positions[nb] - p) ** 2).sum(axis=1)
        res = omt_cost_from_patch(cloud.normals[nb], d2, config)
        rows.append((float(s), res.cost, res.angle))
    return np.array(rows)
