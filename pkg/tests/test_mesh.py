import numpy as np
import pytest

from rfeps import SyntheticSpec, TriangleMesh, make_synthetic, validate_mesh
from rfeps.mesh import point_segment_distances
from rfeps.synth import make_box, make_box_with_hole, make_cylinder, make_wedge


def closest_point_triangle_oracle(p, a, b, c, grid=400):
    """Oracle: dense barycentric sampling of the triangle."""
    best = None
    for i in range(grid + 1):
        for j in range(grid + 1 - i):
            u = i / grid
            v = j / grid
            q = a + u * (b - a) + v * (c - a)
            d = np.linalg.norm(p - q)
            if best is None or d < best:
                best = d
    return best


class TestClosestPoint:
    def test_on_surface_is_fixed(self, rng):
        mesh, _ = make_box(1, 1, 1)
        pts, _, _ = mesh.sample_surface(200, rng)
        cp, d2, _ = mesh.closest_points(pts)
        assert np.abs(cp - pts).max() < 1e-12
        assert d2.max() < 1e-24

    def test_perpendicular_foot(self):
        mesh = TriangleMesh([[0, 0, 0], [4, 0, 0], [0, 4, 0]], [[0, 1, 2]])
        cp, d2, _ = mesh.closest_points([[1.0, 1.0, 3.0]])
        np.testing.assert_allclose(cp[0], [1, 1, 0], atol=1e-14)
        assert d2[0] == pytest.approx(9.0)

    def test_vertex_and_edge_regions(self):
        mesh = TriangleMesh([[0, 0, 0], [1, 0, 0], [0, 1, 0]], [[0, 1, 2]])
        cp, _, _ = mesh.closest_points([[-1, -1, 1], [0.5, -2, 0], [2, 2, 0]])
        np.testing.assert_allclose(cp[0], [0, 0, 0], atol=1e-14)
        np.testing.assert_allclose(cp[1], [0.5, 0, 0], atol=1e-14)
        np.testing.assert_allclose(cp[2], [0.5, 0.5, 0], atol=1e-14)

    def test_matches_scalar_oracle(self, rng):
        mesh, _ = make_box(1.0, 0.7, 0.4)
        tri = mesh.vertices[mesh.triangles]
        pts = rng.normal(size=(40, 3)) * 0.8
        _, d2, _ = mesh.closest_points(pts)
        for p, dd in zip(pts, d2):
            oracle = min(closest_point_triangle_oracle(p, *t, grid=60)
                         for t in tri)
            assert np.sqrt(dd) <= oracle + 1e-6


class TestValidation:
    def test_box_is_watertight(self):
        mesh, _ = make_box(1, 1, 1)
        report = validate_mesh(mesh.vertices, mesh.triangles)
        assert report.watertight_manifold
        assert report.euler_characteristic == 2
        assert report.connected_components == 1

    def test_cylinder_is_watertight(self):
        mesh, _ = make_cylinder(0.4, 1.0, 48)
        report = validate_mesh(mesh.vertices, mesh.triangles)
        assert report.watertight_manifold
        assert report.euler_characteristic == 2

    def test_box_with_hole_genus_one(self):
        mesh, _ = make_box_with_hole(1.0, 0.4)
        report = validate_mesh(mesh.vertices, mesh.triangles)
        assert report.watertight_manifold
        assert report.euler_characteristic == 0

    def test_wedge_is_open(self):
        mesh, _ = make_wedge(np.pi / 2)
        report = validate_mesh(mesh.vertices, mesh.triangles)
        assert not report.closed
        assert report.boundary_edges > 0
        assert report.oriented

    def test_broken_meshes_detected(self):
        v = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]]
        t = [[0, 1, 2], [0, 1, 3], [0, 1, 4]]  # 3 faces share one edge
        report = validate_mesh(v, t)
        assert not report.edge_manifold
        # Inconsistent winding on a shared edge.
        t = [[0, 1, 2], [0, 1, 3]]
        report = validate_mesh(v, t)
        assert not report.oriented


class TestOutwardNormals:
    @pytest.mark.parametrize("builder", [
        lambda: make_box(1, 1, 1),
        lambda: make_cylinder(0.4, 1.0, 64),
        lambda: make_box_with_hole(1.0, 0.4),
    ])
    def test_signed_volume_positive(self, builder):
        mesh, _ = builder()
        tri = mesh.vertices[mesh.triangles]
        vol = np.einsum("ij,ij->i", tri[:, 0],
                        np.cross(tri[:, 1], tri[:, 2])).sum() / 6.0
        assert vol > 0


class TestSampling:
    def test_area_weighted_counts(self, rng):
        mesh = TriangleMesh(
            [[0, 0, 0], [1, 0, 0], [0, 1, 0], [10, 10, 0], [14, 10, 0],
             [10, 14, 0]],
            [[0, 1, 2], [3, 4, 5]])  # areas 0.5 and 8.0
        _, _, tri_ids = mesh.sample_surface(20000, rng)
        frac = (tri_ids == 1).mean()
        assert frac == pytest.approx(8.0 / 8.5, abs=0.02)

    def test_samples_on_surface(self, rng):
        mesh, _ = make_cylinder(0.4, 1.0, 32)
        pts, normals, tri_ids = mesh.sample_surface(500, rng)
        _, d2, _ = mesh.closest_points(pts)
        assert d2.max() < 1e-24
        np.testing.assert_allclose(np.linalg.norm(normals, axis=1), 1.0)

    def test_seeded_reproducibility(self):
        mesh, _ = make_box(1, 1, 1)
        a = mesh.sample_surface(100, np.random.default_rng(7))[0]
        b = mesh.sample_surface(100, np.random.default_rng(7))[0]
        np.testing.assert_array_equal(a, b)


class TestSegments:
    def test_point_segment_distance(self):
        segs = np.array([[[0, 0, 0], [1, 0, 0]]])
        d = point_segment_distances([[0.5, 1, 0], [2, 0, 0], [0.25, 0, 0]], segs)
        np.testing.assert_allclose(d, [1.0, 1.0, 0.0], atol=1e-15)

    def test_box_feature_segments(self):
        mesh, segs = make_box(1, 1, 1)
        assert len(segs) == 12
        lengths = np.linalg.norm(segs[:, 1] - segs[:, 0], axis=1)
        np.testing.assert_allclose(lengths, 1.0)


class TestSynthetic:
    def test_wedge_points_on_halfplanes(self, rng):
        fx = make_synthetic(SyntheticSpec(shape="wedge", n_points=2000,
                                          dihedral=np.pi / 2), seed=3)
        p = fx.cloud.positions
        on_a = np.abs(p[:, 2]) < 1e-12
        on_b = np.abs(p[:, 0]) < 1e-12
        assert np.all(on_a | on_b)
        assert len(fx.segments) == 1

    def test_cube_noise_statistics(self):
        spec = SyntheticSpec(shape="cube", n_points=50000, noise_sigma=0.005)
        fx = make_synthetic(spec, seed=11)
        clean = make_synthetic(SyntheticSpec(shape="cube", n_points=50000),
                               seed=11)
        noise = fx.cloud.positions - clean.cloud.positions
        target = 0.005 * clean.gt_mesh.bbox_diagonal()
        assert np.abs(noise.std(axis=0) - target).max() < 0.05 * target

    def test_exact_flip_count(self):
        spec = SyntheticSpec(shape="cube", n_points=1234, flip_fraction=0.1)
        fx = make_synthetic(spec, seed=5)
        clean = make_synthetic(SyntheticSpec(shape="cube", n_points=1234),
                               seed=5)
        flipped = (fx.cloud.normals * clean.cloud.normals).sum(axis=1) < 0
        assert flipped.sum() == int(0.1 * 1234)

    def test_normal_noise_unit_length(self):
        spec = SyntheticSpec(shape="cube", n_points=500, normal_noise_tau=0.2)
        fx = make_synthetic(spec, seed=5)
        np.testing.assert_allclose(np.linalg.norm(fx.cloud.normals, axis=1),
                                   1.0, atol=1e-12)
