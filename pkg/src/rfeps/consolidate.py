"""Stages 3-5: regularize edge-zone normals, refine positions, generate edge points.

Edge-zone points get their normals re-assigned to the dominant of up to three
representative directions fitted over their off-edge neighbors; positions are
then re-flattened against same-normal neighbors only, and finally every
edge-zone point is projected onto the intersection of its neighbors' tangent
planes, producing new points that lie on the potential feature lines.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import _planarity as pl
from .cloud import NeighborQuery, OrientedCloud, PipelineConfig, PointLabel, \
    build_index
from .edge_zone import neighbor_weights
from .errors import NumericalFailure
from .solver import ConstrainedProblem, equator_frame, framed_normal, minimize


@dataclass
class ProjectionResult:
    source_index: int
    z: np.ndarray
    residual: float


# ---------------------------------------------------------------------------
# Stage 3: normal regularization
# ---------------------------------------------------------------------------

def three_cluster_problem(neighbor_normals, weights, frames, grad_tol=1e-4):
    """Relaxed transport problem with three representatives.

    Variables are ``(u1, v1, u2, v2, u3, v3)`` followed by one simplex triple
    per participating neighbor; each triple sums to one.
    """
    nn = np.asarray(neighbor_normals, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    k = len(nn)

    def func(x):
        lam = x[6:].reshape(k, 3)
        reps, jacs = [], []
        for d in range(3):
            nd, du, dv = framed_normal(frames[d], x[2 * d], x[2 * d + 1])
            reps.append(nd)
            jacs.append((du, dv))
        grad = np.empty(6 + 3 * k)
        value = 0.0
        rho = np.empty((k, 3))
        for d in range(3):
            diff = nn - reps[d]
            rho[:, d] = (diff * diff).sum(axis=1)
            md = w * lam[:, d]
            value += float((md * rho[:, d]).sum())
            pull = (md[:, None] * diff).sum(axis=0)
            grad[2 * d] = -2.0 * float(pull @ jacs[d][0])
            grad[2 * d + 1] = -2.0 * float(pull @ jacs[d][1])
        grad[6:] = (w[:, None] * rho).reshape(-1)
        return value, grad

    lower = np.concatenate([np.full(6, -np.inf), np.zeros(3 * k)])
    upper = np.concatenate([np.full(6, np.inf), np.ones(3 * k)])
    equalities = []
    for j in range(k):
        row = np.zeros(6 + 3 * k)
        row[6 + 3 * j: 9 + 3 * j] = 1.0
        equalities.append((row, 1.0))
    return ConstrainedProblem(dim=6 + 3 * k, func=func, lower=lower,
                              upper=upper, equalities=equalities,
                              grad_tol=grad_tol)


def _three_means(normals, iters=24):
    """Deterministic 3-means seeding + Lloyd rounds on unit vectors."""
    nn = np.asarray(normals, dtype=np.float64)
    k = len(nn)
    gram = nn @ nn.T
    i, j = divmod(int(np.argmin(gram)), k)
    # Third seed: farthest (in the squared-chord sense) from both picks.
    score = gram[i] + gram[j]
    order = np.argsort(score, kind="stable")
    third = next((int(t) for t in order if t not in (i, j)), i)
    centers = nn[[i, j, third]].copy()
    for d in range(3):
        for e in range(d + 1, 3):
            if float(centers[d] @ centers[e]) > 1.0 - 1e-12:
                centers[e] = _nudge(centers[e], 1e-3 * (e + 1))
    for _ in range(iters):
        assign = np.argmax(nn @ centers.T, axis=1)
        for d in range(3):
            members = nn[assign == d]
            if len(members):
                s = members.sum(axis=0)
                if np.linalg.norm(s) > 1e-12:
                    centers[d] = s / np.linalg.norm(s)
    return centers


def _nudge(v, angle):
    helper = np.zeros(3)
    helper[int(np.argmin(np.abs(v)))] = 1.0
    axis = np.cross(v, helper)
    axis /= np.linalg.norm(axis)
    return v * math.cos(angle) + np.cross(axis, v) * math.sin(angle)


def _alternate3(normals, weights, centers, rounds=12):
    for _ in range(rounds):
        assign = np.argmax(normals @ centers.T, axis=1)
        for d in range(3):
            mask = assign == d
            if mask.any():
                s = (weights[mask, None] * normals[mask]).sum(axis=0)
                if np.linalg.norm(s) > 1e-12:
                    centers[d] = s / np.linalg.norm(s)
    assign = np.argmax(normals @ centers.T, axis=1)
    lam = np.zeros((len(normals), 3))
    lam[np.arange(len(normals)), assign] = 1.0
    return centers, lam


def regularize_normals(cloud: OrientedCloud, edge_set, query: NeighborQuery,
                       config: PipelineConfig, delta):
    """Replace each edge-zone normal with its dominant cluster representative.

    ``edge_set`` is an index array of edge-zone points; neighbors that are
    themselves in the set carry unreliable normals and are excluded from the
    fit.  Returns ``(normals, info)`` with the full normal array updated on
    the edge set.
    """
    r = config.radius_mult * delta
    in_set = np.zeros(len(cloud), dtype=bool)
    in_set[edge_set] = True
    normals = cloud.normals.copy()
    skipped = []
    for i in edge_set:
        nb = query.radius_of(i, r)
        nb = nb[~in_set[nb]]
        if len(nb) < 3:
            skipped.append(i)
            continue
        nn = cloud.normals[nb]
        d2 = ((cloud.positions[nb] - cloud.positions[i]) ** 2).sum(axis=1)
        w = neighbor_weights(d2, config.eps_denom, config.weighted_omt)
        centers, lam = _alternate3(nn, w, _three_means(nn))
        frames = tuple(equator_frame(c) for c in centers)
        problem = three_cluster_problem(nn, w, frames, grad_tol=config.grad_tol)
        x0 = np.concatenate([np.tile([math.pi / 2.0, 0.0], 3), lam.reshape(-1)])
        try:
            x, value, _ = minimize(problem, x0)
        except NumericalFailure:
            skipped.append(i)
            continue
        reps = np.array([framed_normal(frames[d], x[2 * d], x[2 * d + 1])[0]
                         for d in range(3)])
        mass = x[6:].reshape(-1, 3).sum(axis=0)
        normals[i] = _dominant_representative(reps, mass)
    info = {"skipped": np.array(skipped, dtype=np.intp)}
    return normals, info


def _dominant_representative(reps, mass):
    """Most significant representative, merging near-coincident clusters."""
    groups = []
    for d in range(3):
        for g in groups:
            if math.acos(min(1.0, abs(float(reps[d] @ reps[g[0]])))) < 1e-3:
                g.append(d)
                break
        else:
            groups.append([d])
    best_rep, best_mass = None, -1.0
    for g in groups:
        gm = float(mass[list(g)].sum())
        rep = (mass[list(g), None] * reps[list(g)]).sum(axis=0)
        if np.linalg.norm(rep) < 1e-12:
            rep = reps[g[0]]
        rep = rep / np.linalg.norm(rep)
        if gm > best_mass + 1e-12 or (abs(gm - best_mass) <= 1e-12
                                      and best_rep is not None
                                      and tuple(rep) < tuple(best_rep)):
            best_rep, best_mass = rep, gm
    return best_rep


# ---------------------------------------------------------------------------
# Stage 4: position refinement
# ---------------------------------------------------------------------------

def similar_neighbor_lists(cloud: OrientedCloud, query: NeighborQuery,
                           r, angle_thresh):
    """Radius neighbors filtered to those with similar normal direction."""
    cos_t = math.cos(angle_thresh)
    lists = query.radius_of_many(np.arange(len(cloud)), r)
    out = []
    for i, nb in enumerate(lists):
        if len(nb) == 0:
            out.append(nb)
            continue
        dots = cloud.normals[nb] @ cloud.normals[i]
        out.append(nb[dots >= cos_t])
    return out


def refine_positions(cloud: OrientedCloud, query: NeighborQuery,
                     config: PipelineConfig, delta, sweeps=3):
    """Move points along their fixed normals to flatten same-normal patches.

    No fidelity term is used here; the regularized normals are trusted.
    Points with no similar-normal neighbor stay put.
    """
    n = len(cloud)
    r = config.radius_mult * delta
    bound = 3.0 * delta
    lists = similar_neighbor_lists(cloud, query, r, config.angle_thresh)
    rows, cols, indptr, counts = pl.neighbor_csr(lists)
    positions = cloud.positions
    normals = cloud.normals
    eps = np.zeros(n)
    trace = [pl.planarity_objective(positions, eps, normals, rows, cols, n, 0.0)]
    for _ in range(sweeps):
        frozen = positions + eps[:, None] * normals
        base = positions[rows] - frozen[cols]
        # Same per-point stationarity contract as the denoising sweeps.
        score = pl.frozen_point_gradients(base, eps, normals, rows, cols, n,
                                          0.0, with_normals=False)
        active = score > config.grad_tol
        if not active.any():
            break
        new_eps = np.where(active,
                           pl.best_eps(base, normals, rows, cols, n, 0.0,
                                       -bound, bound),
                           eps)
        # Best strictly improving damped step (Jacobi can oscillate).
        best = None
        step = 1.0
        for _ in range(6):
            trial = eps + step * (new_eps - eps)
            value = pl.planarity_objective(positions, trial, normals,
                                           rows, cols, n, 0.0)
            if best is None or value < best[0]:
                best = (value, trial)
            step *= 0.5
        if best[0] >= trace[-1] - 1e-15 * (1.0 + abs(trace[-1])):
            break
        value, eps = best
        trace.append(value)
    out = cloud.copy()
    out.positions = positions + eps[:, None] * normals
    return out, {"objective_trace": trace, "eps": eps}


def refinement_problem(positions, normals, neighbor_lists):
    """Stage-4 objective over the offsets, for the gradient-check suite."""
    positions = np.asarray(positions, dtype=np.float64)
    normals = np.asarray(normals, dtype=np.float64)
    n = len(positions)
    rows, cols, indptr, _ = pl.neighbor_csr(neighbor_lists)

    def func(x):
        eps = np.asarray(x, dtype=np.float64)
        disp = positions + eps[:, None] * normals
        value = 0.0
        grad = np.zeros(n)
        for i in range(n):
            nb = cols[indptr[i]:indptr[i + 1]]
            if len(nb) == 0:
                continue
            d = disp[i] - disp[nb]
            t = d @ normals[i]
            g = (d * t[:, None]).sum(axis=0)
            value += float(g @ g)
            dg = normals[i] * t.sum() + d.sum(axis=0)
            grad[i] += 2.0 * float(g @ dg)
            contrib = -(normals[nb] * t[:, None]
                        + d * (normals[nb] @ normals[i])[:, None])
            grad[nb] += 2.0 * (contrib @ g)
        return value, grad

    return ConstrainedProblem(dim=n, func=func)


# ---------------------------------------------------------------------------
# Stage 5: edge point generation
# ---------------------------------------------------------------------------

def projection_system(i, cloud: OrientedCloud, neighbors, mu):
    """Normal equations of the tangent-plane projection for point ``i``."""
    nn = cloud.normals[neighbors]
    pp = cloud.positions[neighbors]
    outer = np.einsum("ki,kj->ij", nn, nn)
    A = outer + mu * np.eye(3)
    b = np.einsum("ki,kj,kj->i", nn, nn, pp) + mu * cloud.positions[i]
    return A, b


def project_to_edge(i, cloud: OrientedCloud, query: NeighborQuery,
                    config: PipelineConfig, delta) -> ProjectionResult:
    """Closed-form minimizer of the plane-fit + proximity objective."""
    nb = query.radius_of(i, config.radius_mult * delta)
    A, b = projection_system(i, cloud, nb, config.mu)
    z = np.linalg.solve(A, b)
    return ProjectionResult(i, z, projection_residual(z, i, cloud, nb, config.mu))


def projection_residual(z, i, cloud, neighbors, mu):
    dots = ((z - cloud.positions[neighbors]) * cloud.normals[neighbors]).sum(axis=1)
    return float((dots ** 2).sum() + mu * ((z - cloud.positions[i]) ** 2).sum())


def projection_problem(i, cloud: OrientedCloud, neighbors, mu, grad_tol=1e-6):
    """The same objective as a solver problem (dual route for verification)."""
    nn = cloud.normals[neighbors]
    pp = cloud.positions[neighbors]
    pi = cloud.positions[i]

    def func(z):
        dots = ((z - pp) * nn).sum(axis=1)
        value = float((dots ** 2).sum() + mu * ((z - pi) ** 2).sum())
        grad = 2.0 * (nn * dots[:, None]).sum(axis=0) + 2.0 * mu * (z - pi)
        return value, grad

    return ConstrainedProblem(dim=3, func=func, grad_tol=grad_tol, max_iter=2000)


def project_all(cloud: OrientedCloud, edge_set, query: NeighborQuery,
                config: PipelineConfig, delta):
    """Vectorized closed-form projections for every edge-zone point."""
    edge_set = np.asarray(edge_set, dtype=np.intp)
    if len(edge_set) == 0:
        return []
    r = config.radius_mult * delta
    lists = query.radius_of_many(edge_set, r)
    rows, cols, indptr, counts = pl.neighbor_csr(lists)
    m = len(edge_set)
    nn = cloud.normals[cols]
    outer = nn[:, :, None] * nn[:, None, :]
    A = pl.segment_sum(outer, rows, m) + config.mu * np.eye(3)[None]
    pb = (outer * cloud.positions[cols][:, None, :]).sum(axis=2)
    b = pl.segment_sum(pb, rows, m) + config.mu * cloud.positions[edge_set]
    z = np.linalg.solve(A, b[:, :, None])[:, :, 0]
    results = []
    for local, i in enumerate(edge_set):
        nb = cols[indptr[local]:indptr[local + 1]]
        results.append(ProjectionResult(
            int(i), z[local],
            projection_residual(z[local], int(i), cloud, nb, config.mu)))
    return results


def augment(cloud: OrientedCloud, projections, config: PipelineConfig,
            delta) -> OrientedCloud:
    """Append projected edge points to the cloud.

    Original points keep their labels; new points are labeled generated-edge
    and carry the power weight ``weight_mult * delta**2``.  Generated points
    closer than ``0.25 * delta`` are merged to their centroid so downstream
    power-diagram sites stay distinct.
    """
    if not projections:
        return cloud.copy()
    z = np.array([p.z for p in projections])
    src = np.array([p.source_index for p in projections], dtype=np.intp)
    z, src = _merge_close(z, src, 0.25 * delta, cloud)
    out_positions = np.vstack([cloud.positions, z])
    gen_normals = cloud.normals[src]
    out_normals = np.vstack([cloud.normals, gen_normals])
    out_labels = np.concatenate([
        cloud.labels,
        np.full(len(z), PointLabel.GENERATED_EDGE, dtype=np.uint8)])
    out_weights = np.concatenate([
        cloud.weights, np.full(len(z), config.weight_mult * delta ** 2)])
    return OrientedCloud(out_positions, out_normals, out_labels, out_weights)


def _merge_close(points, sources, radius, cloud):
    """Union-find merge of point pairs closer than ``radius`` (keep centroids)."""
    tree = NeighborQuery(points)
    pairs = tree.tree.query_pairs(radius, output_type="ndarray")
    n = len(points)
    parent = np.arange(n)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for a, b in pairs:
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[max(ra, rb)] = min(ra, rb)
    roots = np.array([find(i) for i in range(n)])
    merged_pts, merged_src = [], []
    for root in np.unique(roots):
        members = np.where(roots == root)[0]
        merged_pts.append(points[members].mean(axis=0))
        merged_src.append(sources[members[0]])
    return np.array(merged_pts), np.array(merged_src, dtype=np.intp)
