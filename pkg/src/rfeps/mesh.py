"""Indexed triangle meshes: the restriction domain, ground truth and output type.

Provides exact closest-point queries (used to project sites onto the base
surface and for point-to-surface distances), uniform area-weighted surface
sampling, and watertight / manifold validation of reconstruction output.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput


class TriangleMesh:
    """Immutable vertex / triangle arrays with cached per-face data."""

    def __init__(self, vertices, triangles):
        self.vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0
                                    or self.triangles.max() >= len(self.vertices)):
            raise InvalidInput("triangle index out of range")
        tri = self.vertices[self.triangles]
        cross = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        self.face_areas = 0.5 * np.linalg.norm(cross, axis=1)
        lens = np.linalg.norm(cross, axis=1)
        lens[lens == 0] = 1.0
        self.face_normals = cross / lens[:, None]

    def __repr__(self):
        return f"TriangleMesh({len(self.vertices)} vertices, {len(self.triangles)} triangles)"

    @property
    def area(self):
        return float(self.face_areas.sum())

    def drop_degenerate(self, rel_tol=1e-12):
        """Return a copy without zero-area triangles (ingest cleanup)."""
        scale = self.face_areas.max() if len(self.triangles) else 1.0
        keep = self.face_areas > rel_tol * max(scale, 1e-300)
        return TriangleMesh(self.vertices, self.triangles[keep])

    def bbox_diagonal(self):
        if len(self.vertices) == 0:
            return 0.0
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    # -- closest point ------------------------------------------------------

    def closest_points(self, points, block=512):
        """Exact closest surface point for each query.

        Returns ``(points_on_surface, squared_distances, triangle_ids)``.
        Brute-force over triangles, vectorized in blocks; intended for the
        moderate mesh sizes of restriction domains.
        """
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        q = len(points)
        out_pts = np.empty((q, 3))
        out_d2 = np.empty(q)
        out_tri = np.empty(q, dtype=np.int64)
        tri = self.vertices[self.triangles]
        for start in range(0, q, block):
            p = points[start:start + block]
            cp = _closest_point_block(p, tri)  # (m, T, 3)
            d2 = ((cp - p[:, None, :]) ** 2).sum(axis=2)
            best = d2.argmin(axis=1)
            rows = np.arange(len(p))
            out_pts[start:start + block] = cp[rows, best]
            out_d2[start:start + block] = d2[rows, best]
            out_tri[start:start + block] = best
        return out_pts, out_d2, out_tri

    # -- sampling -----------------------------------------------------------

    def sample_surface(self, n, rng):
        """Uniform area-weighted surface samples with face normals.

        Returns ``(points, normals, triangle_ids)``.  ``rng`` is a
        ``numpy.random.Generator`` so sampling stays reproducible.
        """
        if self.area <= 0:
            raise InvalidInput("cannot sample a zero-area mesh")
        probs = self.face_areas / self.face_areas.sum()
        tri_ids = rng.choice(len(self.triangles), size=n, p=probs)
        r1 = rng.random(n)
        r2 = rng.random(n)
        flip = r1 + r2 > 1.0
        r1[flip] = 1.0 - r1[flip]
        r2[flip] = 1.0 - r2[flip]
        tri = self.vertices[self.triangles[tri_ids]]
        pts = (tri[:, 0]
               + r1[:, None] * (tri[:, 1] - tri[:, 0])
               + r2[:, None] * (tri[:, 2] - tri[:, 0]))
        return pts, self.face_normals[tri_ids], tri_ids


def _closest_point_block(points, tri):
    """Closest point on each triangle for each query point.

    ``points`` is (m, 3), ``tri`` is (T, 3, 3); returns (m, T, 3).  Standard
    barycentric-region case analysis, fully vectorized.
    """
    a = tri[None, :, 0, :]
    b = tri[None, :, 1, :]
    c = tri[None, :, 2, :]
    p = points[:, None, :]

    ab = b - a
    ac = c - a
    ap = p - a
    d1 = (ab * ap).sum(-1)
    d2 = (ac * ap).sum(-1)

    bp = p - b
    d3 = (ab * bp).sum(-1)
    d4 = (ac * bp).sum(-1)

    cp = p - c
    d5 = (ab * cp).sum(-1)
    d6 = (ac * cp).sum(-1)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    denom_v = vc + np.where(vc == 0, 1e-300, 0.0)  # guarded below by masks
    out = np.empty(np.broadcast_shapes(p.shape, a.shape))

    # Interior (default): barycentric projection onto the plane.
    denom = va + vb + vc
    denom = np.where(denom == 0, 1e-300, denom)
    v_in = vb / denom
    w_in = vc / denom
    out[:] = a + v_in[..., None] * ab + w_in[..., None] * ac

    # Edge AC region.
    mask = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    t = d2 / np.where(d2 - d6 == 0, 1e-300, d2 - d6)
    cand = a + t[..., None] * ac
    out = np.where(mask[..., None], cand, out)

    # Edge BC region.
    mask = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    t = (d4 - d3) / np.where((d4 - d3) + (d5 - d6) == 0, 1e-300,
                             (d4 - d3) + (d5 - d6))
    cand = b + t[..., None] * (c - b)
    out = np.where(mask[..., None], cand, out)

    # Edge AB region.
    mask = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    t = d1 / np.where(d1 - d3 == 0, 1e-300, d1 - d3)
    cand = a + t[..., None] * ab
    out = np.where(mask[..., None], cand, out)

    # Vertex regions last: they win over any edge/face candidate.
    mask = (d1 <= 0) & (d2 <= 0)
    out = np.where(mask[..., None], np.broadcast_to(a, out.shape), out)
    mask = (d3 >= 0) & (d4 <= d3)
    out = np.where(mask[..., None], np.broadcast_to(b, out.shape), out)
    mask = (d6 >= 0) & (d5 <= d6)
    out = np.where(mask[..., None], np.broadcast_to(c, out.shape), out)
    return out


@dataclass
class MeshValidation:
    closed: bool
    edge_manifold: bool
    vertex_manifold: bool
    oriented: bool
    connected_components: int
    euler_characteristic: int
    boundary_edges: int
    nonmanifold_edges: int
    isolated_vertices: int

    @property
    def watertight_manifold(self):
        return (self.closed and self.edge_manifold and self.vertex_manifold
                and self.oriented and self.isolated_vertices == 0)


def validate_mesh(vertices, triangles) -> MeshValidation:
    """Structural report: closedness, manifoldness, orientation, Euler number."""
    vertices = np.asarray(vertices).reshape(-1, 3)
    triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    nv = len(vertices)
    used = np.zeros(nv, dtype=bool)
    if len(triangles):
        used[triangles.ravel()] = True
    isolated = int(nv - used.sum())

    halfedges = {}
    edge_count = {}
    for t in triangles:
        for i in range(3):
            a, b = int(t[i]), int(t[(i + 1) % 3])
            key = (min(a, b), max(a, b))
            edge_count[key] = edge_count.get(key, 0) + 1
            halfedges[(a, b)] = halfedges.get((a, b), 0) + 1

    boundary = sum(1 for c in edge_count.values() if c == 1)
    nonmanifold = sum(1 for c in edge_count.values() if c > 2)
    closed = boundary == 0 and len(triangles) > 0
    edge_manifold = nonmanifold == 0
    # Consistent orientation: each undirected interior edge is traversed once
    # in each direction.
    oriented = all(c <= 1 for c in halfedges.values())

    vertex_manifold = _vertex_links_are_disks(triangles, nv) if edge_manifold else False

    ne = len(edge_count)
    nf = len(triangles)
    euler = int(used.sum()) - ne + nf

    comps = _face_components(triangles, edge_count)
    return MeshValidation(
        closed=closed,
        edge_manifold=edge_manifold,
        vertex_manifold=vertex_manifold,
        oriented=oriented,
        connected_components=comps,
        euler_characteristic=euler,
        boundary_edges=boundary,
        nonmanifold_edges=nonmanifold,
        isolated_vertices=isolated,
    )


def _vertex_links_are_disks(triangles, nv):
    """Each vertex star must form a single edge cycle (or chain on boundary)."""
    star = [[] for _ in range(nv)]
    for fid, t in enumerate(triangles):
        for v in t:
            star[int(v)].append(fid)
    for v in range(nv):
        faces = star[v]
        if not faces:
            continue
        # Union-find over the faces of the star, joined via shared star edges.
        parent = list(range(len(faces)))

        def find(i):
            while parent[i] != i:
                parent[i] = parent[parent[i]]
                i = parent[i]
            return i

        edge_to_local = {}
        for li, fid in enumerate(faces):
            t = triangles[fid]
            others = [int(x) for x in t if x != v]
            if len(others) != 2:
                return False  # degenerate triangle at v
            # Star faces are adjacent when they share an edge incident to v.
            for u in others:
                edge_to_local.setdefault(u, []).append(li)
        for locs in edge_to_local.values():
            if len(locs) > 2:
                return False
            if len(locs) == 2:
                ra, rb = find(locs[0]), find(locs[1])
                if ra != rb:
                    parent[ra] = rb
        roots = {find(i) for i in range(len(faces))}
        if len(roots) != 1:
            return False
    return True


def _face_components(triangles, edge_count):
    nf = len(triangles)
    if nf == 0:
        return 0
    edge_to_faces = {}
    for fid, t in enumerate(triangles):
        for i in range(3):
            a, b = int(t[i]), int(t[(i + 1) % 3])
            key = (min(a, b), max(a, b))
            edge_to_faces.setdefault(key, []).append(fid)
    parent = list(range(nf))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for faces in edge_to_faces.values():
        for other in faces[1:]:
            ra, rb = find(faces[0]), find(other)
            if ra != rb:
                parent[ra] = rb
    return len({find(i) for i in range(nf)})


def point_segment_distances(points, segments):
    """Distance from each point to the nearest segment in the list.

    ``segments`` has shape (S, 2, 3).  Vectorized over both axes.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, 2, 3)
    a = segments[:, 0][None]          # (1, S, 3)
    d = (segments[:, 1] - segments[:, 0])[None]
    pa = points[:, None, :] - a
    dd = (d * d).sum(-1)
    t = np.clip((pa * d).sum(-1) / np.where(dd == 0, 1.0, dd), 0.0, 1.0)
    closest = a + t[..., None] * d
    dist = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    return dist.min(axis=1)
