"""Restricted power diagram on a base triangle mesh and its dual mesh.

Each base triangle is partitioned among the weighted sites by clipping it
against power-bisector half-spaces (the bisector of two sites is offset from
the Euclidean bisector by half the weight difference along the axis).  Cell
discovery flood-fills outward from the power-nearest sites of the triangle
corners, and a security-radius argument bounds the candidate set per site,
keeping the construction near-linear in the number of sites.

The dual connects sites whose restricted cells share boundary: one mesh
vertex per site with a nonempty cell, one triangle per surface point where
three cells meet.  With equal weights the construction degenerates, bit for
bit, to the restricted Voronoi diagram of the same sites.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .cloud import OrientedCloud
from .errors import DuplicateSite, NonManifoldOutput
from .mesh import TriangleMesh

# The restriction domain is an ordinary indexed triangle mesh.
BaseSurface = TriangleMesh


@dataclass
class WeightedSite:
    position: np.ndarray
    weight: float
    source: int

    def power(self, x):
        d = np.asarray(x) - self.position
        return float((d * d).sum() - self.weight)


def project_sites(cloud: OrientedCloud, base: TriangleMesh):
    """Project every cloud point to its closest base-surface point.

    Weights are copied and the source index is kept so dual connectivity can
    be transferred back to the original points.
    """
    on_surface, _, _ = base.closest_points(cloud.positions)
    return [WeightedSite(on_surface[i], float(cloud.weights[i]), i)
            for i in range(len(cloud))]


@dataclass
class RestrictedPowerDiagram:
    """Clipped cells per site plus the adjacency structure of the partition.

    ``cells[s]`` is a list of ``(triangle_id, vertices, edge_planes)`` where
    ``edge_planes[i]`` identifies the plane carrying the edge from vertex
    ``i`` to vertex ``i+1``: a site index for a power bisector, or ``-1..-3``
    for the host triangle's own edges.
    """

    site_positions: np.ndarray
    site_weights: np.ndarray
    site_sources: np.ndarray
    base: TriangleMesh
    cells: dict = field(default_factory=dict)
    areas: np.ndarray = None
    adjacency: set = field(default_factory=set)
    triple_corners: list = field(default_factory=list)

    def nonempty_sites(self):
        return np.array(sorted(self.cells.keys()), dtype=np.intp)

    def coverage_error(self):
        total = self.areas.sum()
        return abs(total - self.base.area) / self.base.area


_EDGE_LEN_TOL = 1e-12
_MERGE_TOL_SQ = 1e-30


def _polygon_area(verts):
    acc = np.zeros(3)
    for i in range(len(verts)):
        a = verts[i]
        b = verts[(i + 1) % len(verts)]
        acc += np.cross(a, b)
    return 0.5 * float(np.linalg.norm(acc))


def _clip(verts, ids, nx, ny, nz, off, uid):
    """Clip a convex polygon against ``n . x <= off``; tracks edge provenance.

    Returns ``(verts, ids)`` lists; empty lists when nothing remains.
    """
    m = len(verts)
    d = [verts[i][0] * nx + verts[i][1] * ny + verts[i][2] * nz - off
         for i in range(m)]
    if all(v <= 0.0 for v in d):
        return verts, ids
    if all(v > 0.0 for v in d):
        return [], []
    out_v = []
    out_i = []
    for i in range(m):
        j = (i + 1) % m
        di, dj = d[i], d[j]
        if di <= 0.0:
            out_v.append(verts[i])
            out_i.append(ids[i])
            if dj > 0.0:
                t = di / (di - dj)
                vi, vj = verts[i], verts[j]
                out_v.append((vi[0] + t * (vj[0] - vi[0]),
                              vi[1] + t * (vj[1] - vi[1]),
                              vi[2] + t * (vj[2] - vi[2])))
                out_i.append(uid)
        elif dj <= 0.0:
            t = di / (di - dj)
            vi, vj = verts[i], verts[j]
            out_v.append((vi[0] + t * (vj[0] - vi[0]),
                          vi[1] + t * (vj[1] - vi[1]),
                          vi[2] + t * (vj[2] - vi[2])))
            out_i.append(ids[i])
    # Merge consecutive coincident vertices; the later vertex owns the
    # outgoing edge, so its plane id survives.
    if len(out_v) >= 2:
        merged_v, merged_i = [], []
        for v, pid in zip(out_v, out_i):
            if merged_v:
                last = merged_v[-1]
                dx = v[0] - last[0]
                dy = v[1] - last[1]
                dz = v[2] - last[2]
                if dx * dx + dy * dy + dz * dz < _MERGE_TOL_SQ:
                    merged_i[-1] = pid
                    continue
            merged_v.append(v)
            merged_i.append(pid)
        if len(merged_v) >= 2:
            last, first = merged_v[-1], merged_v[0]
            dx = first[0] - last[0]
            dy = first[1] - last[1]
            dz = first[2] - last[2]
            if dx * dx + dy * dy + dz * dz < _MERGE_TOL_SQ:
                merged_v.pop()
                merged_i.pop()
        out_v, out_i = merged_v, merged_i
    if len(out_v) < 3:
        return [], []
    return out_v, out_i


def _check_duplicates(positions, weights):
    _, inverse, counts = np.unique(positions, axis=0, return_inverse=True,
                                   return_counts=True)
    dup_groups = np.where(counts > 1)[0]
    for g in dup_groups:
        members = np.where(inverse == g)[0]
        w = weights[members]
        if np.unique(w).size < len(members):
            raise DuplicateSite(
                f"sites {members.tolist()} share a position and a weight")


class _SiteCandidates:
    """Distance-ordered neighbor candidates per site, grown on demand."""

    def __init__(self, positions, k0=48):
        self.positions = positions
        self.tree = cKDTree(positions)
        self.n = len(positions)
        self.k = min(max(k0, 2), self.n)
        dist, idx = self.tree.query(positions, k=self.k)
        self.dist = np.atleast_2d(dist)
        self.idx = np.atleast_2d(idx)

    def get(self, s, k):
        k = min(k, self.n)
        if k > self.idx.shape[1]:
            grow = min(max(2 * self.idx.shape[1], k), self.n)
            dist, idx = self.tree.query(self.positions, k=grow)
            self.dist, self.idx = np.atleast_2d(dist), np.atleast_2d(idx)
        ids = self.idx[s, :k]
        dists = self.dist[s, :k]
        keep = ids != s
        return ids[keep], dists[keep]

    def exhausted(self, k):
        return k >= self.n


def compute_rpd(sites, base: TriangleMesh, candidate_k=48) -> RestrictedPowerDiagram:
    """Clip every base triangle into the power cells of the sites."""
    if isinstance(sites, (list, tuple)) and sites and isinstance(sites[0], WeightedSite):
        positions = np.array([s.position for s in sites], dtype=np.float64)
        weights = np.array([s.weight for s in sites], dtype=np.float64)
        sources = np.array([s.source for s in sites], dtype=np.intp)
    else:
        positions, weights, sources = sites
        positions = np.asarray(positions, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        sources = np.asarray(sources, dtype=np.intp)
    n_sites = len(positions)
    if n_sites < 2:
        raise ValueError("need at least 2 sites")
    _check_duplicates(positions, weights)

    w_max = float(weights.max())
    sq = (positions * positions).sum(axis=1)
    cand = _SiteCandidates(positions, k0=candidate_k)
    tri_vertices = base.vertices[base.triangles]
    edge_to_tris = _base_edge_map(base)

    seeds = _corner_owners(positions, weights, base, cand.tree, w_max)

    pos_list = [tuple(p) for p in positions]
    rpd = RestrictedPowerDiagram(positions, weights, sources, base)
    areas = np.zeros(n_sites)
    adjacency = set()
    triples = []
    cells = {}

    queue = deque()
    seen = set()
    for t in range(len(base.triangles)):
        for s in seeds[t]:
            if (t, s) not in seen:
                seen.add((t, s))
                queue.append((t, s))

    while queue:
        t, s = queue.popleft()
        verts = [tuple(v) for v in tri_vertices[t]]
        ids = [-1, -2, -3]
        sx, sy, sz = pos_list[s]
        ws = weights[s]
        k = candidate_k
        examined = 0
        safe = False
        while True:
            cand_ids, cand_dists = cand.get(s, k)
            for ci in range(examined, len(cand_ids)):
                if not verts:
                    safe = True
                    break
                u = int(cand_ids[ci])
                # Security radius: no site beyond this distance can cut.
                dmax_sq = max((v[0] - sx) ** 2 + (v[1] - sy) ** 2
                              + (v[2] - sz) ** 2 for v in verts)
                dmax = math.sqrt(dmax_sq)
                bound = dmax + math.sqrt(dmax_sq + max(0.0, w_max - ws))
                if cand_dists[ci] > bound:
                    safe = True
                    break
                ux, uy, uz = pos_list[u]
                nx, ny, nz = 2.0 * (ux - sx), 2.0 * (uy - sy), 2.0 * (uz - sz)
                dw = ws - weights[u]
                off = sq[u] - sq[s] + dw
                if nx == 0.0 and ny == 0.0 and nz == 0.0:
                    if off < 0.0:  # coincident heavier site wins everywhere
                        verts, ids = [], []
                    continue
                verts, ids = _clip(verts, ids, nx, ny, nz, off, u)
                if not verts:
                    safe = True
                    break
            else:
                examined = len(cand_ids)
                if cand.exhausted(k):
                    safe = True
                if not safe:
                    k = min(2 * k, n_sites)
                    continue
            break

        if not verts:
            continue
        varr = np.array(verts)
        area = _polygon_area(varr)
        cells.setdefault(s, []).append((t, varr, np.array(ids, dtype=np.int64)))
        areas[s] += area

        m = len(verts)
        for i in range(m):
            j = (i + 1) % m
            pid = ids[i]
            vi, vj = verts[i], verts[j]
            seg = math.sqrt((vj[0] - vi[0]) ** 2 + (vj[1] - vi[1]) ** 2
                            + (vj[2] - vi[2]) ** 2)
            if seg <= _EDGE_LEN_TOL:
                continue
            if pid >= 0:
                adjacency.add((min(s, pid), max(s, pid)))
                if (t, pid) not in seen:
                    seen.add((t, pid))
                    queue.append((t, pid))
            else:
                t2 = _tri_across(edge_to_tris, base, t, pid)
                if t2 is not None and (t2, s) not in seen:
                    seen.add((t2, s))
                    queue.append((t2, s))
            # A corner whose two incident edges are both bisectors is a
            # point where three cells meet.
            prev = ids[i - 1]
            if prev >= 0 and pid >= 0 and prev != pid:
                triples.append((s, prev, pid, vi, t))

    rpd.cells = cells
    rpd.areas = areas
    rpd.adjacency = adjacency
    rpd.triple_corners = triples
    return rpd


def _base_edge_map(base: TriangleMesh):
    edge_to_tris = {}
    for t, tri in enumerate(base.triangles):
        for e in range(3):
            a, b = int(tri[e]), int(tri[(e + 1) % 3])
            edge_to_tris.setdefault((min(a, b), max(a, b)), []).append(t)
    return edge_to_tris


def _tri_across(edge_to_tris, base, t, pid):
    e = -pid - 1  # ids -1,-2,-3 are triangle edges 0,1,2
    tri = base.triangles[t]
    a, b = int(tri[e]), int(tri[(e + 1) % 3])
    tris = edge_to_tris.get((min(a, b), max(a, b)), [])
    others = [x for x in tris if x != t]
    return others[0] if others else None


def _corner_owners(positions, weights, base, tree, w_max):
    """Power-nearest site for each triangle corner and centroid."""
    tri_pts = base.vertices[base.triangles]
    probes = np.concatenate([tri_pts.reshape(-1, 3),
                             tri_pts.mean(axis=1)])
    owners = _power_argmin(probes, positions, weights, tree, w_max)
    ntri = len(base.triangles)
    corner = owners[:3 * ntri].reshape(ntri, 3)
    centroid = owners[3 * ntri:]
    return [set(corner[t]).union({centroid[t]}) for t in range(ntri)]


def _power_argmin(probes, positions, weights, tree, w_max):
    n_sites = len(positions)
    k = min(16, n_sites)
    pending = np.arange(len(probes))
    owners = np.empty(len(probes), dtype=np.intp)
    while len(pending):
        dist, idx = tree.query(probes[pending], k=k)
        dist = np.atleast_2d(dist)
        idx = np.atleast_2d(idx)
        powers = dist**2 - weights[idx]
        best = powers.argmin(axis=1)
        rows = np.arange(len(pending))
        owners[pending] = idx[rows, best]
        if k >= n_sites:
            break
        # Any unexamined site is at least as far as the k-th hit; its power
        # cannot beat the current best if that bound already exceeds it.
        unsafe = powers[rows, best] > dist[:, -1] ** 2 - w_max
        pending = pending[unsafe]
        k = min(2 * k, n_sites)
    return owners


# ---------------------------------------------------------------------------
# Dual extraction
# ---------------------------------------------------------------------------

@dataclass
class _DualFace:
    tri: tuple          # vertex indices, winding applied
    pos: np.ndarray     # representative corner position on the base surface
    base_tri: int       # hosting base triangle (for its normal)


def extract_dual(rpd: RestrictedPowerDiagram, cloud: OrientedCloud,
                 raise_on_nonmanifold=True):
    """Triangle mesh connecting sites whose cells meet at common corners.

    Vertices take the original (pre-projection) positions of the sites'
    source points.  Returns ``(mesh, info)``; ``info`` lists dropped sites
    and cleanup actions.
    """
    nonempty = rpd.nonempty_sites()
    n_total = len(rpd.site_positions)
    dropped = n_total - len(nonempty)
    if dropped:
        warnings.warn(f"{dropped} sites have empty restricted cells and are "
                      "dropped from the dual", stacklevel=2)
    site_to_vertex = {int(s): i for i, s in enumerate(nonempty)}

    diag = max(rpd.base.bbox_diagonal(), 1e-300)
    snap_tol = 1e-9 * diag
    dedup_tol = 1e-6 * diag
    groups = {}
    for s, u, w, pos, t in rpd.triple_corners:
        key = tuple(sorted((int(s), int(u), int(w))))
        groups.setdefault(key, []).append((np.asarray(pos), t))
    faces = []
    for key, instances in groups.items():
        if any(k not in site_to_vertex for k in key):
            continue  # corner references a site that lost its whole cell
        # Two-level clustering: exact corners snap at 1e-9 of the bbox; a
        # looser merge removes float-split duplicates while keeping genuinely
        # separate meetings of the same three cells (a valid closed dual of
        # very few sites repeats a triple at two distant locations).
        clusters = _position_clusters(instances, snap_tol)
        clusters = _position_clusters(clusters, dedup_tol)
        a, b, c = (site_to_vertex[k] for k in key)
        for pos, t in clusters:
            faces.append(_DualFace((a, b, c), pos, int(t)))

    proj = rpd.site_positions[nonempty]
    for f in faces:
        _orient_against_base(f, proj, rpd.base)
    neighbor_count = np.zeros(len(nonempty), dtype=np.int64)
    for a, b in rpd.adjacency:
        for s in (a, b):
            v = site_to_vertex.get(int(s))
            if v is not None:
                neighbor_count[v] += 1
    faces, removed, dissolved = _cleanup_overcovered(faces, neighbor_count)

    validation_edges = _nonmanifold_edges([f.tri for f in faces])
    if validation_edges and raise_on_nonmanifold:
        bad_sites = sorted({int(nonempty[v]) for e in validation_edges for v in e})
        raise NonManifoldOutput(
            f"{len(validation_edges)} non-manifold edges remain after cleanup",
            sites=bad_sites)

    tris = _orient_consistently(faces, proj, rpd.base)

    # Compact away vertices that no face references (dissolved pocket cells
    # and degenerate slivers); they cannot take part in a closed surface.
    referenced = np.zeros(len(nonempty), dtype=bool)
    if len(tris):
        referenced[tris.ravel()] = True
    if not referenced.all():
        remap = -np.ones(len(nonempty), dtype=np.int64)
        remap[referenced] = np.arange(int(referenced.sum()))
        tris = remap[tris] if len(tris) else tris
        nonempty = nonempty[referenced]
    vertices = cloud.positions[rpd.site_sources[nonempty]]
    mesh = TriangleMesh(vertices, tris)
    info = {
        "dropped_sites": dropped,
        "removed_faces": removed,
        "dissolved_sites": dissolved,
        "nonmanifold_edges": len(validation_edges),
        "site_of_vertex": rpd.site_sources[nonempty],
    }
    return mesh, info


def _position_clusters(instances, tol):
    """Greedy position clustering of ``(pos, tri)`` pairs."""
    clusters = []
    for pos, t in instances:
        placed = False
        for c in clusters:
            if np.linalg.norm(c[0] - pos) <= max(tol, 1e-300):
                placed = True
                break
        if not placed:
            clusters.append((pos, t))
    return clusters


def _orient_against_base(face: _DualFace, proj, base):
    a, b, c = face.tri
    n_geom = np.cross(proj[b] - proj[a], proj[c] - proj[a])
    if float(n_geom @ base.face_normals[face.base_tri]) < 0.0:
        face.tri = (a, c, b)


def _edge_faces(tris):
    edge_faces = {}
    for f, tri in enumerate(tris):
        for i in range(3):
            a, b = tri[i], tri[(i + 1) % 3]
            edge_faces.setdefault((min(a, b), max(a, b)), []).append(f)
    return edge_faces


def _nonmanifold_edges(tris):
    return [e for e, fl in _edge_faces(tris).items() if len(fl) > 2]


def _cleanup_overcovered(faces, neighbor_count):
    """Resolve edges bounded by more than two faces.

    A cell with exactly two distinct neighbors is a pocket: its pair of
    pillow triangles shares a vertex-pair edge with the regular faces
    outside the pocket, which no simplicial mesh can carry.  Dissolving the
    pocket site fuses the two outer boundary arcs and restores manifoldness
    (a standalone pillow, e.g. the closed dual of three sites, has no
    over-covered edge and is kept).  Any residual conflicts are peeled one
    face at a time as a last resort.
    """
    removed = 0
    dissolved = set()
    for _ in range(256):
        tris = [f.tri for f in faces]
        bad = _nonmanifold_edges(tris)
        if not bad:
            break
        edge_faces = _edge_faces(tris)
        pocket = None
        for e in bad:
            for fi in edge_faces[e]:
                for v in faces[fi].tri:
                    if neighbor_count[v] == 2 and v not in dissolved:
                        pocket = v
                        break
                if pocket is not None:
                    break
            if pocket is not None:
                break
        if pocket is not None:
            dissolved.add(pocket)
            faces = [f for f in faces if pocket not in f.tri]
            continue
        score = np.zeros(len(faces), dtype=np.int64)
        for e in bad:
            for fi in edge_faces[e]:
                score[fi] += 1
        worst = int(score.argmax())
        if score[worst] == 0:
            break
        faces = [f for i, f in enumerate(faces) if i != worst]
        removed += 1
    return faces, removed, sorted(dissolved)


def _orient_consistently(faces, proj, base):
    """Breadth-first orientation propagation with a majority-vote anchor.

    Faces start aligned with the base normal individually; propagation makes
    every shared edge traversed once in each direction, and each connected
    component keeps whichever global sign the majority of its faces prefer.
    """
    if not faces:
        return np.zeros((0, 3), dtype=np.int64)
    n = len(faces)
    tris = [f.tri for f in faces]
    edge_faces = _edge_faces(tris)
    flipped = np.zeros(n, dtype=bool)
    visited = np.zeros(n, dtype=bool)
    align = np.empty(n)
    for f, face in enumerate(faces):
        a, b, c = face.tri
        geom = np.cross(proj[b] - proj[a], proj[c] - proj[a])
        align[f] = float(geom @ base.face_normals[face.base_tri])

    for start in range(n):
        if visited[start]:
            continue
        comp = [start]
        visited[start] = True
        queue = deque([start])
        while queue:
            f = queue.popleft()
            tri = _apply_flip(tris[f], flipped[f])
            for i in range(3):
                a, b = tri[i], tri[(i + 1) % 3]
                for g in edge_faces.get((min(a, b), max(a, b)), []):
                    if g == f or visited[g]:
                        continue
                    gtri = _apply_flip(tris[g], flipped[g])
                    ghalf = {(gtri[i2], gtri[(i2 + 1) % 3]) for i2 in range(3)}
                    if (a, b) in ghalf:  # same traversal: neighbor must flip
                        flipped[g] = True
                    visited[g] = True
                    comp.append(g)
                    queue.append(g)
        votes = sum((1.0 if not flipped[f] else -1.0) * np.sign(align[f])
                    for f in comp)
        if votes < 0:
            for f in comp:
                flipped[f] = not flipped[f]
    out = [_apply_flip(tris[f], flipped[f]) for f in range(n)]
    return np.array(out, dtype=np.int64)


def _apply_flip(tri, flip):
    return (tri[0], tri[2], tri[1]) if flip else tri
