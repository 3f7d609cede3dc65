"""Evaluation metrics for consolidation (point-to-surface) and reconstruction.

Distances are reported squared, matching the convention of the comparison
tables this kind of pipeline is judged by; F-scores use an absolute distance
threshold in the normalized coordinate frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput
from .mesh import TriangleMesh, point_segment_distances

F_SCORE_THRESHOLD = 0.005
EDGE_PROXIMITY_TOL = 0.005
EDGE_SAMPLE_ANGLE = np.deg2rad(30.0)
EDGE_SAMPLE_RADIUS = 0.01


@dataclass
class MetricsReport:
    ocd: float = None
    oecd: float = None
    cd: float = None
    f1: float = None
    nc: float = None
    ecd: float = None
    ef1: float = None
    sample_count: int = 0
    thresholds: dict = field(default_factory=lambda: {
        "f_score": F_SCORE_THRESHOLD,
        "edge_proximity": EDGE_PROXIMITY_TOL,
        "edge_sample_angle": float(EDGE_SAMPLE_ANGLE),
        "edge_sample_radius": EDGE_SAMPLE_RADIUS,
    })

    def to_dict(self):
        return {
            "ocd": self.ocd, "oecd": self.oecd, "cd": self.cd, "f1": self.f1,
            "nc": self.nc, "ecd": self.ecd, "ef1": self.ef1,
            "sample_count": self.sample_count, "thresholds": self.thresholds,
        }


def one_sided_cd(points, mesh: TriangleMesh, n_samples=None, seed=0):
    """Mean squared distance from a point set to a mesh surface.

    Exact point-to-triangle distances by default.  When ``n_samples`` is
    given, the surface is represented by that many uniform samples instead
    (cheaper for huge meshes, seed-dependent).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise InvalidInput("one_sided_cd needs a non-empty point set")
    if n_samples is None:
        _, d2, _ = mesh.closest_points(points)
        return float(d2.mean())
    rng = np.random.default_rng(seed)
    surf, _, _ = mesh.sample_surface(n_samples, rng)
    d, _ = cKDTree(surf).query(points)
    return float((d**2).mean())


def edge_filter(points, segments, tol=EDGE_PROXIMITY_TOL):
    """Indices of points within ``tol`` of any feature segment."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        return np.empty(0, dtype=np.intp)
    dist = point_segment_distances(points, segments)
    return np.where(dist < tol)[0]


def one_sided_ecd(points, mesh: TriangleMesh, segments, tol=EDGE_PROXIMITY_TOL,
                  n_samples=None, seed=0):
    """One-sided squared distance restricted to near-feature points."""
    keep = edge_filter(points, segments, tol)
    if len(keep) == 0:
        return None
    return one_sided_cd(np.asarray(points)[keep], mesh,
                        n_samples=n_samples, seed=seed)


def _sample_with_normals(mesh, n, rng):
    pts, normals, _ = mesh.sample_surface(n, rng)
    return pts, normals


def mesh_metrics(pred: TriangleMesh, gt: TriangleMesh, n_samples=100000,
                 seed=0):
    """Chamfer distance, F-score and normal consistency between two meshes.

    Both surfaces are sampled uniformly with ``n_samples`` points; CD is the
    mean of the two one-sided mean squared nearest-sample distances, F1 uses
    the fixed distance threshold, and NC averages the absolute normal dot
    product over mutual nearest pairs.
    """
    # One stream per surface: identical meshes then yield identical samples,
    # making the identity values exact.
    p_pts, p_nrm = _sample_with_normals(pred, n_samples,
                                        np.random.default_rng(seed))
    g_pts, g_nrm = _sample_with_normals(gt, n_samples,
                                        np.random.default_rng(seed))
    p_tree = cKDTree(p_pts)
    g_tree = cKDTree(g_pts)

    d_pg, idx_pg = g_tree.query(p_pts)
    d_gp, idx_gp = p_tree.query(g_pts)
    cd = 0.5 * (float((d_pg**2).mean()) + float((d_gp**2).mean()))

    precision = float((d_pg < F_SCORE_THRESHOLD).mean())
    recall = float((d_gp < F_SCORE_THRESHOLD).mean())
    f1 = 0.0 if precision + recall == 0 else \
        2.0 * precision * recall / (precision + recall)

    nc_pg = np.abs((p_nrm * g_nrm[idx_pg]).sum(axis=1))
    nc_gp = np.abs((g_nrm * p_nrm[idx_gp]).sum(axis=1))
    nc = float(np.concatenate([nc_pg, nc_gp]).mean())
    return cd, f1, nc


def extract_edge_samples(points, normals, radius=EDGE_SAMPLE_RADIUS,
                         angle=EDGE_SAMPLE_ANGLE):
    """Samples whose neighborhood contains a sharply different normal."""
    points = np.asarray(points)
    normals = np.asarray(normals)
    tree = cKDTree(points)
    pairs = tree.query_pairs(radius, output_type="ndarray")
    min_dot = np.ones(len(points))
    if len(pairs):
        dots = (normals[pairs[:, 0]] * normals[pairs[:, 1]]).sum(axis=1)
        np.minimum.at(min_dot, pairs[:, 0], dots)
        np.minimum.at(min_dot, pairs[:, 1], dots)
    return np.where(min_dot < np.cos(angle))[0]


def edge_metrics(pred: TriangleMesh, gt: TriangleMesh, n_samples=100000,
                 seed=0):
    """Chamfer distance and F-score restricted to sharp-dihedral samples.

    Returns ``(None, None)`` when either mesh exposes no edge samples (a
    smooth shape), rather than reporting zero.
    """
    p_pts, p_nrm = _sample_with_normals(pred, n_samples,
                                        np.random.default_rng(seed))
    g_pts, g_nrm = _sample_with_normals(gt, n_samples,
                                        np.random.default_rng(seed))
    p_edge = extract_edge_samples(p_pts, p_nrm)
    g_edge = extract_edge_samples(g_pts, g_nrm)
    if len(p_edge) == 0 or len(g_edge) == 0:
        return None, None
    pe = p_pts[p_edge]
    ge = g_pts[g_edge]
    d_pg, _ = cKDTree(ge).query(pe)
    d_gp, _ = cKDTree(pe).query(ge)
    ecd = 0.5 * (float((d_pg**2).mean()) + float((d_gp**2).mean()))
    precision = float((d_pg < F_SCORE_THRESHOLD).mean())
    recall = float((d_gp < F_SCORE_THRESHOLD).mean())
    ef1 = 0.0 if precision + recall == 0 else \
        2.0 * precision * recall / (precision + recall)
    return ecd, ef1


def full_report(pred: TriangleMesh, gt: TriangleMesh, cloud_points=None,
                segments=None, n_samples=100000, seed=0) -> MetricsReport:
    """All reconstruction metrics, plus consolidation metrics when inputs allow."""
    report = MetricsReport(sample_count=n_samples)
    report.cd, report.f1, report.nc = mesh_metrics(pred, gt, n_samples, seed)
    report.ecd, report.ef1 = edge_metrics(pred, gt, n_samples, seed)
    if cloud_points is not None:
        report.ocd = one_sided_cd(cloud_points, gt)
        if segments is not None:
            report.oecd = one_sided_ecd(cloud_points, gt, segments)
    return report
