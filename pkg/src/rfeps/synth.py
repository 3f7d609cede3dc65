"""Synthetic analytic fixtures: shapes, samplers, noise and normal corruption.

Every fixture provides the ground-truth triangle mesh (doubling as the
restriction domain for the diagram stage), the analytic feature segments,
and a seeded white-noise surface sampling with optional Gaussian position
noise, normal flips and normal perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cloud import OrientedCloud
from .errors import InvalidInput
from .mesh import TriangleMesh


@dataclass
class SyntheticSpec:
    shape: str = "cube"             # cube, wedge, cylinder, box_with_hole, thin_plate
    n_points: int = 50000
    noise_sigma: float = 0.0        # fraction of the bbox diagonal
    flip_fraction: float = 0.0
    normal_noise_tau: float = 0.0
    dihedral: float = math.pi / 2.0  # wedge opening angle
    thickness: float = 0.1           # thin plate
    segments: int = 96               # cylinder tessellation

    def __post_init__(self):
        if self.shape not in ("cube", "wedge", "cylinder", "box_with_hole",
                              "thin_plate"):
            raise InvalidInput(f"unknown shape {self.shape!r}")
        if not (0.0 < self.dihedral < math.pi):
            raise InvalidInput("dihedral must lie in (0, pi)")
        if not (0.0 <= self.flip_fraction <= 1.0):
            raise InvalidInput("flip_fraction must lie in [0, 1]")


@dataclass
class SyntheticFixture:
    cloud: OrientedCloud
    gt_mesh: TriangleMesh
    segments: np.ndarray      # (S, 2, 3) feature line segments
    base_mesh: TriangleMesh   # restriction domain (the ground truth itself)
    spec: SyntheticSpec


def make_synthetic(spec: SyntheticSpec, seed=0) -> SyntheticFixture:
    mesh, segments = _build_shape(spec)
    rng = np.random.default_rng(seed)
    pts, normals, _ = mesh.sample_surface(spec.n_points, rng)
    if spec.noise_sigma > 0:
        sigma = spec.noise_sigma * mesh.bbox_diagonal()
        pts = pts + rng.normal(0.0, sigma, size=pts.shape)
    if spec.flip_fraction > 0:
        n_flip = int(spec.flip_fraction * len(pts))
        idx = rng.choice(len(pts), size=n_flip, replace=False)
        normals = normals.copy()
        normals[idx] = -normals[idx]
    if spec.normal_noise_tau > 0:
        rand = rng.normal(size=normals.shape)
        rand /= np.linalg.norm(rand, axis=1, keepdims=True)
        normals = normals + spec.normal_noise_tau * rand
        normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    cloud = OrientedCloud(pts, normals)
    return SyntheticFixture(cloud, mesh, segments, mesh, spec)


def _build_shape(spec: SyntheticSpec):
    if spec.shape == "cube":
        return make_box(1.0, 1.0, 1.0)
    if spec.shape == "thin_plate":
        return make_box(1.0, 1.0, spec.thickness)
    if spec.shape == "wedge":
        return make_wedge(spec.dihedral)
    if spec.shape == "cylinder":
        return make_cylinder(0.4, 1.0, spec.segments)
    if spec.shape == "box_with_hole":
        return make_box_with_hole(1.0, 0.4)
    raise InvalidInput(spec.shape)


def make_box(sx, sy, sz):
    """Axis-aligned box centered at the origin; 12 feature edges."""
    hx, hy, hz = sx / 2.0, sy / 2.0, sz / 2.0
    corners = np.array([[x, y, z]
                        for x in (-hx, hx) for y in (-hy, hy) for z in (-hz, hz)])
    # Outward-wound faces of the unit-corner ordering above.
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    tris = []
    for a, b, c, d in quads:
        tris.append([a, b, c])
        tris.append([a, c, d])
    mesh = TriangleMesh(corners, tris)
    segments = _sharp_segments_of(mesh)
    return mesh, segments


def make_wedge(dihedral, width=1.0, depth=1.0):
    """Two rectangles joined along a crease with the given opening angle.

    Face A lies in the z = 0 plane; face B is rotated about the crease (the
    y axis) so the angle between the half-planes equals ``dihedral``.  The
    surface is open; it serves the classifier fixtures, not the mesher.
    """
    c = math.cos(dihedral)
    s = math.sin(dihedral)
    hw = width / 2.0
    v = np.array([
        [0.0, -hw, 0.0], [0.0, hw, 0.0],          # crease
        [depth, -hw, 0.0], [depth, hw, 0.0],      # face A far edge
        [depth * c, -hw, depth * s], [depth * c, hw, depth * s],  # face B far
    ])
    tris = [
        [0, 2, 3], [0, 3, 1],   # face A, normal +z
        [0, 1, 5], [0, 5, 4],   # face B, normal consistent across the crease
    ]
    mesh = TriangleMesh(v, tris)
    segments = np.array([[v[0], v[1]]])
    return mesh, segments


def wedge_face_normals(dihedral):
    """Consistently oriented analytic normals (face A, face B)."""
    na = np.array([0.0, 0.0, 1.0])
    nb = np.array([math.sin(dihedral), 0.0, -math.cos(dihedral)])
    return na, nb


def wedge_probe_path(dihedral, span, count):
    """Surface path crossing the crease at y = 0.

    Returns ``(signed_distances, points)``: negative arc lengths walk up
    face B, positive ones walk along face A.
    """
    svals = np.linspace(-span, span, count)
    pts = np.empty((count, 3))
    c, s = math.cos(dihedral), math.sin(dihedral)
    for i, t in enumerate(svals):
        if t >= 0:
            pts[i] = (t, 0.0, 0.0)
        else:
            pts[i] = (-t * c, 0.0, -t * s)
    return svals, pts


def make_wedge_grid(dihedral, n_points, width=1.0, depth=1.0):
    """Regular-grid wedge sampling (the toy arrangement for profile scans).

    Rows run parallel to the crease and are offset by half a cell, so a
    probe on the crease sees exactly mirrored neighbor sets on both faces.
    White-noise sampling cannot provide that balance: the half-mass coupling
    then pays for the Poisson count imbalance and the crease cost stays
    visibly above zero.
    """
    h = math.sqrt(2.0 * width * depth / n_points)
    nx = max(2, int(round(depth / h)))
    ny = max(2, int(round(width / h)))
    xs = (np.arange(nx) + 0.5) * (depth / nx)
    ys = (np.arange(ny) + 0.5) * (width / ny) - width / 2.0
    na, nb = wedge_face_normals(dihedral)
    c, s = math.cos(dihedral), math.sin(dihedral)
    pts = []
    normals = []
    for x in xs:
        for y in ys:
            pts.append((x, y, 0.0))
            normals.append(na)
            pts.append((x * c, y, x * s))
            normals.append(nb)
    cloud = OrientedCloud(np.array(pts), np.array(normals))
    mesh, segments = make_wedge(dihedral, width, depth)
    return SyntheticFixture(cloud, mesh, segments, mesh,
                            SyntheticSpec(shape="wedge", n_points=len(pts),
                                          dihedral=dihedral))


def make_cylinder(radius, height, segments=96):
    """Closed cylinder; features are the two cap rims (polyline circles)."""
    n = segments
    ang = np.linspace(0.0, 2.0 * math.pi, n, endpoint=False)
    ring = np.stack([radius * np.cos(ang), radius * np.sin(ang)], axis=1)
    hz = height / 2.0
    bottom = np.column_stack([ring, np.full(n, -hz)])
    top = np.column_stack([ring, np.full(n, hz)])
    centers = np.array([[0.0, 0.0, -hz], [0.0, 0.0, hz]])
    vertices = np.vstack([bottom, top, centers])
    cb, ct = 2 * n, 2 * n + 1
    tris = []
    for i in range(n):
        j = (i + 1) % n
        tris.append([i, j, n + i])          # lateral, outward
        tris.append([j, n + j, n + i])
        tris.append([cb, j, i])             # bottom cap, normal -z
        tris.append([ct, n + i, n + j])     # top cap, normal +z
    mesh = TriangleMesh(vertices, tris)
    segs = []
    for ring_pts in (bottom, top):
        for i in range(n):
            segs.append([ring_pts[i], ring_pts[(i + 1) % n]])
    return mesh, np.array(segs)


def make_box_with_hole(size=1.0, hole=0.4):
    """Box with a square through-hole along z (genus 1, Euler number 0)."""
    h = size / 2.0
    a = hole / 2.0
    vertices = []
    for z in (-h, h):
        for x, y in ((-h, -h), (h, -h), (h, h), (-h, h)):
            vertices.append([x, y, z])      # outer ring
        for x, y in ((-a, -a), (a, -a), (a, a), (-a, a)):
            vertices.append([x, y, z])      # inner ring
    vertices = np.array(vertices, dtype=np.float64)
    OB, IB, OT, IT = 0, 4, 8, 12  # ring starts: outer/inner, bottom/top
    tris = []

    def quad(q, flip=False):
        x, y, z, w = q
        if flip:
            tris.extend([[x, z, y], [x, w, z]])
        else:
            tris.extend([[x, y, z], [x, z, w]])

    for i in range(4):
        j = (i + 1) % 4
        # Outer wall, outward normals.
        quad((OB + i, OB + j, OT + j, OT + i))
        # Inner wall, normals pointing into the hole.
        quad((IB + i, IT + i, IT + j, IB + j))
        # Bottom annulus (normal -z) and top annulus (+z).
        quad((OB + i, IB + i, IB + j, OB + j))
        quad((OT + i, OT + j, IT + j, IT + i))
    mesh = TriangleMesh(vertices, tris)
    segments = _sharp_segments_of(mesh)
    return mesh, segments


def _sharp_segments_of(mesh: TriangleMesh, angle=np.deg2rad(20.0)):
    """Edges shared by faces whose normals differ by more than ``angle``."""
    edge_faces = {}
    for t, tri in enumerate(mesh.triangles):
        for e in range(3):
            va, vb = int(tri[e]), int(tri[(e + 1) % 3])
            edge_faces.setdefault((min(va, vb), max(va, vb)), []).append(t)
    segs = []
    cos_t = math.cos(angle)
    for (va, vb), faces in edge_faces.items():
        if len(faces) != 2:
            continue
        d = float(mesh.face_normals[faces[0]] @ mesh.face_normals[faces[1]])
        if d < cos_t:
            segs.append([mesh.vertices[va], mesh.vertices[vb]])
    return np.array(segs)
