import numpy as np
import pytest
from scipy.stats import chisquare

from scenefuse.field import VoxelRadianceField
from scenefuse.geometry import (
    NearestIndex, PointCloud, TriangleMesh, estimate_normals, marching_cubes, nearest_distance,
    nearest_distances, read_mesh_ply, read_ply, sample_surface, voxel_downsample, write_mesh_ply, write_ply,
)

from conftest import analytic_field, box_sdf, sphere_sdf

AABB = np.array([[-1.0] * 3, [1.0] * 3])


def edge_use_counts(mesh):
    e = np.sort(np.concatenate([mesh.triangles[:, [0, 1]], mesh.triangles[:, [1, 2]],
                                mesh.triangles[:, [2, 0]]]), axis=1)
    _, counts = np.unique(e, axis=0, return_counts=True)
    return counts


def two_triangles():
    v = np.array([[0, 0, 0], [3, 0, 0], [0, 2, 0], [10, 0, 0], [11, 0, 0], [10, 2, 0]], dtype=float)
    return TriangleMesh(v, [[0, 1, 2], [3, 4, 5]], np.tile([0, 0, 1.0], (6, 1)))


class TestMarchingCubes:
    def test_sphere_radius(self):
        r = 0.6
        fld = analytic_field(AABB, 41, sphere_sdf([0, 0, 0], r), sigma=100.0)
        mesh = marching_cubes(fld, 50.0)
        radii = np.linalg.norm(mesh.vertices, axis=1)
        assert np.all(np.abs(radii - r) <= 1.5 * fld.voxel_size)

    def test_normals_point_outward(self):
        fld = analytic_field(AABB, 41, sphere_sdf([0, 0, 0], 0.6), sigma=100.0)
        mesh = marching_cubes(fld, 50.0)
        assert np.all(np.einsum("ij,ij->i", mesh.normals, mesh.vertices) > 0)
        np.testing.assert_allclose(np.linalg.norm(mesh.normals, axis=1), 1.0, atol=1e-9)

    def test_empty_field_gives_empty_mesh(self):
        mesh = marching_cubes(VoxelRadianceField.empty(AABB, (8, 8, 8)), 5.0)
        assert mesh.is_empty and len(mesh.vertices) == 0

    def test_slab_faces(self):
        fld = analytic_field(AABB, 41, box_sdf([-2, -2, -0.3], [2, 2, 0.2]), sigma=100.0)
        mesh = marching_cubes(fld, 50.0)
        z = mesh.vertices[:, 2]
        inner = np.all(np.abs(mesh.vertices[:, :2]) < 0.9, axis=1)
        assert abs(z[inner].min() - (-0.3)) <= fld.voxel_size
        assert abs(z[inner].max() - 0.2) <= fld.voxel_size

    def test_watertight_interior_surface(self):
        fld = analytic_field(AABB, 33, lambda p: np.minimum(sphere_sdf([0.2, 0, 0], 0.4)(p),
                                                            sphere_sdf([-0.3, 0.1, 0.1], 0.35)(p)), sigma=100.0)
        mesh = marching_cubes(fld, 50.0)
        assert np.all(edge_use_counts(mesh) == 2)

    def test_rejects_non_positive_iso(self):
        with pytest.raises(ValueError):
            marching_cubes(VoxelRadianceField.empty(AABB, (4, 4, 4)), 0.0)


class TestSampleSurface:
    def test_points_on_triangle_plane(self):
        v = np.array([[0.1, 0.2, 0.3], [1.0, -0.5, 0.7], [-0.4, 0.9, 1.1]])
        n = np.cross(v[1] - v[0], v[2] - v[0])
        n /= np.linalg.norm(n)
        mesh = TriangleMesh(v, [[0, 1, 2]], np.tile(n, (3, 1)))
        cloud = sample_surface(mesh, 1000, seed=1)
        assert np.max(np.abs((cloud.points - v[0]) @ n)) < 1e-9
        # barycentric coordinates stay inside the triangle
        m = np.column_stack([v[1] - v[0], v[2] - v[0], n])
        bc = np.linalg.solve(m, (cloud.points - v[0]).T).T
        assert np.all(bc[:, :2] >= -1e-9) and np.all(bc[:, 0] + bc[:, 1] <= 1 + 1e-9)

    def test_area_split(self):
        mesh = two_triangles()
        assert mesh.triangle_areas()[0] / mesh.triangle_areas()[1] == pytest.approx(3.0)
        cloud = sample_surface(mesh, 4000, seed=7)
        first = int(np.sum(cloud.points[:, 0] < 5))
        assert abs(first - 3000) <= 150

    def test_uniform_density_chi_squared(self):
        fld = analytic_field(AABB, 41, sphere_sdf([0, 0, 0], 0.6), sigma=100.0)
        cloud = sample_surface(marching_cubes(fld, 50.0), 20000, seed=3)
        # equal-area strata on a sphere: equal slices of z (Archimedes)
        z = cloud.points[:, 2] / np.linalg.norm(cloud.points, axis=1)
        counts, _ = np.histogram(z, bins=np.linspace(-1, 1, 11))
        assert chisquare(counts).pvalue > 0.01

    def test_deterministic(self):
        mesh = two_triangles()
        a, b = sample_surface(mesh, 100, 5), sample_surface(mesh, 100, 5)
        assert np.array_equal(a.points, b.points)

    def test_empty_mesh_fails(self):
        with pytest.raises(ValueError):
            sample_surface(TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 3))), 10)


class TestNearest:
    def test_query_on_target_point(self):
        pts = np.random.default_rng(0).normal(size=(50, 3))
        assert nearest_distance(pts[17], PointCloud(pts)) == 0.0

    def test_distance_to_sphere_samples(self):
        rng = np.random.default_rng(1)
        d = rng.normal(size=(4000, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        gap = np.max(NearestIndex(d).tree.query(d, k=2)[0][:, 1])
        assert abs(nearest_distance([0, 0, 2.0], PointCloud(d)) - 1.0) <= gap

    def test_matches_brute_force_exactly(self):
        rng = np.random.default_rng(2)
        target = rng.uniform(-1, 1, (700, 3))
        q = rng.uniform(-1.5, 1.5, (1000, 3))
        brute = np.sqrt(((q[:, None, :] - target[None]) ** 2).sum(-1)).min(axis=1)
        np.testing.assert_array_equal(nearest_distances(q, PointCloud(target)), brute)

    def test_empty_target_fails(self):
        with pytest.raises(ValueError):
            nearest_distance([0, 0, 0], PointCloud(np.zeros((0, 3))))


class TestCloudHelpers:
    def test_voxel_downsample_one_point_per_cell(self):
        pts = np.random.default_rng(3).uniform(0, 1, (5000, 3))
        down = voxel_downsample(PointCloud(pts), 0.25)
        keys = np.floor(down.points / 0.25).astype(int)
        assert len(down) == len(np.unique(keys, axis=0)) == 64

    def test_estimate_normals_on_plane(self):
        rng = np.random.default_rng(4)
        pts = np.c_[rng.uniform(-1, 1, (400, 2)), np.zeros(400)]
        n = estimate_normals(pts, viewpoint=[0, 0, -5])
        np.testing.assert_allclose(np.abs(n[:, 2]), 1.0, atol=1e-9)
        assert np.all(n[:, 2] > 0)

    def test_normals_must_be_unit(self):
        with pytest.raises(ValueError):
            PointCloud(np.zeros((2, 3)), np.ones((2, 3)))


class TestPly:
    def test_cloud_round_trip_with_labels(self, tmp_path):
        rng = np.random.default_rng(5)
        n = rng.normal(size=(30, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        cloud = PointCloud(rng.normal(size=(30, 3)), n, rng.integers(0, 256, 30).astype(np.uint8))
        write_ply(tmp_path / "c.ply", cloud)
        assert (tmp_path / "c.ply").read_bytes().startswith(b"ply\nformat binary_little_endian 1.0\n")
        back = read_ply(tmp_path / "c.ply")
        np.testing.assert_allclose(back.points, cloud.points, atol=1e-12)
        np.testing.assert_allclose(back.normals, cloud.normals, atol=1e-6)
        np.testing.assert_array_equal(back.labels, cloud.labels)

    def test_plain_cloud_round_trip(self, tmp_path):
        cloud = PointCloud(np.arange(12.0).reshape(4, 3))
        write_ply(tmp_path / "p.ply", cloud)
        back = read_ply(tmp_path / "p.ply")
        np.testing.assert_allclose(back.points, cloud.points)
        assert back.normals is None and back.labels is None

    def test_mesh_round_trip(self, tmp_path):
        fld = analytic_field(AABB, 17, sphere_sdf([0, 0, 0], 0.5), sigma=100.0)
        mesh = marching_cubes(fld, 50.0)
        write_mesh_ply(tmp_path / "m.ply", mesh)
        back = read_mesh_ply(tmp_path / "m.ply")
        np.testing.assert_array_equal(back.triangles, mesh.triangles)
        np.testing.assert_allclose(back.vertices, mesh.vertices, atol=1e-12)
