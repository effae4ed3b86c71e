import numpy as np
import pytest

from scenefuse.camera import Camera, look_at, make_camera
from scenefuse.field import VoxelRadianceField
from scenefuse.poses import PoseSE3
from scenefuse.scenegen import Placement, Primitive, analytic_visibility, sample_hemisphere_cameras, signed_distance
from scenefuse.visibility import (
    VisibilityField, compute_visibility_field, load_visibility, point_visible, query, save_visibility, smooth,
)

from conftest import analytic_field, box_sdf

AABB = np.array([[-1.0] * 3, [1.0] * 3])


def smooth_oracle(values, iterations):
    """Loop-by-loop synchronous neighbour averaging."""
    v = values.copy()
    nx, ny, nz = v.shape
    for _ in range(iterations):
        out = np.empty_like(v)
        for i in range(nx):
            for j in range(ny):
                for k in range(nz):
                    acc, cnt = 0.0, 0
                    for di, dj, dk in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
                        a, b, c = i + di, j + dj, k + dk
                        if 0 <= a < nx and 0 <= b < ny and 0 <= c < nz:
                            acc += v[a, b, c]
                            cnt += 1
                    out[i, j, k] = acc / cnt
        v = out
    return v


def total_variation(v):
    return sum(np.abs(np.diff(v, axis=a)).sum() for a in range(3))


class TestPointVisible:
    def test_empty_field_in_frustum(self):
        fld = VoxelRadianceField.empty(AABB, (9, 9, 9))
        cam = make_camera([0, 0, -4], [0, 0, 0], 32, 32, 40.0)
        assert point_visible(fld, [0.1, 0.2, 0.3], cam, fld.default_settings()) == 1

    def test_behind_opaque_slab(self):
        fld = analytic_field(AABB, 33, box_sdf([-1, -1, -0.2], [1, 1, 0.0]), sigma=200.0)
        cam = make_camera([0, 0, -4], [0, 0, 0], 32, 32, 40.0)
        st = fld.default_settings()
        assert point_visible(fld, [0.0, 0.0, 0.5], cam, st) == 0
        assert point_visible(fld, [0.0, 0.0, -0.6], cam, st) == 1

    def test_outside_image(self):
        fld = VoxelRadianceField.empty(AABB, (9, 9, 9))
        cam = make_camera([0, 0, -4], [0, 0, 0], 32, 32, 10.0)
        assert point_visible(fld, [0.9, 0.0, 0.0], cam, fld.default_settings()) == 0
        assert point_visible(fld, [0.0, 0.0, -5.0], cam, fld.default_settings()) == 0


class TestComputeVisibility:
    def test_all_cameras_see_everything_in_empty_space(self):
        fld = VoxelRadianceField.empty(AABB, (9, 9, 9))
        cams = sample_hemisphere_cameras(20, 6.0, (0, 0, 0), 3, 64, 64, 60.0, -80.0)
        vf = compute_visibility_field(fld, cams, resolution=8)
        assert np.all(vf.values == 1.0)

    def test_inside_opaque_object(self):
        fld = analytic_field(AABB, 33, box_sdf([-0.5] * 3, [0.5] * 3), sigma=300.0)
        cams = sample_hemisphere_cameras(30, 5.0, (0, 0, 0), 3, 48, 48, 50.0, -80.0)
        vf = compute_visibility_field(fld, cams, resolution=9)
        assert vf.values[4, 4, 4] == 0.0

    def test_quarter_visible_through_shell(self):
        # 100 cameras on a ring; an opaque shell blocks every azimuth outside (-1.8, 88.2) degrees
        cams = []
        for k in range(100):
            phi = 2 * np.pi * k / 100
            eye = 3.0 * np.array([np.cos(phi), np.sin(phi), 0.0])
            cams.append(Camera(40.0, 40.0, 16.0, 16.0, 32, 32, look_at(eye, [0, 0, 0]), 0.05, 10.0))

        def shell(p):
            r = np.hypot(p[:, 0], p[:, 1])
            az = np.degrees(np.arctan2(p[:, 1], p[:, 0]))
            open_ = (az > -1.8) & (az < 88.2)
            return np.where((r > 0.5) & (r < 0.8) & (np.abs(p[:, 2]) < 0.6) & ~open_, -1.0, 1.0)

        fld = analytic_field(AABB, 65, shell, sigma=400.0)
        vf = compute_visibility_field(fld, cams, resolution=9)
        expected = sum(1 for k in range(100) if 3.6 * k < 88.2) / 100
        assert expected == 0.25
        assert vf.values[4, 4, 4] == pytest.approx(expected, abs=1e-12)

    def test_counts_are_integers(self):
        fld = analytic_field(AABB, 33, box_sdf([-0.4, -0.4, -1], [0.4, 0.4, 0.2]), sigma=80.0)
        cams = sample_hemisphere_cameras(37, 4.0, (0, 0, 0), 5, 32, 32, 40.0)
        vf = compute_visibility_field(fld, cams, resolution=10)
        k = vf.values * 37
        np.testing.assert_allclose(k, np.round(k), atol=1e-9)
        assert k.min() >= 0 and k.max() <= 37

    def test_matches_analytic_tracer_away_from_surfaces(self):
        prim = Primitive("box", [0.3, 0.4, 0.25], [0.5] * 3)
        pl = [Placement(1, prim, PoseSE3(np.eye(3), [0.1, -0.1, 0.0]))]
        fld = analytic_field(AABB, 65, lambda p: signed_distance(pl, p), sigma=400.0)
        cams = sample_hemisphere_cameras(60, 4.0, (0, 0, 0), 8, 64, 64, 45.0, -60.0)
        vf = compute_visibility_field(fld, cams, resolution=24)
        nodes = vf.node_positions().reshape(-1, 3)
        ref = analytic_visibility(pl, cams, nodes)
        away = np.abs(signed_distance(pl, nodes)) > vf.spacing.max()
        close = np.abs(vf.values.reshape(-1) - ref) <= 0.05
        assert close[away].mean() >= 0.95

    def test_needs_cameras(self):
        with pytest.raises(ValueError):
            compute_visibility_field(VoxelRadianceField.empty(AABB, (4, 4, 4)), [])


class TestSmooth:
    def test_constant_is_fixed_point(self):
        vf = VisibilityField(AABB, np.full((5, 6, 7), 0.37))
        for it in (0, 1, 4, 9):
            np.testing.assert_allclose(smooth(vf, it).values, 0.37, atol=1e-15)

    def test_single_impulse(self):
        v = np.zeros((5, 5, 5))
        v[2, 2, 2] = 1.0
        out = smooth(VisibilityField(AABB, v), 1).values
        assert out[2, 2, 2] == 0.0
        for d in ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)):
            assert out[2 + d[0], 2 + d[1], 2 + d[2]] == pytest.approx(1 / 6)
        assert out.sum() == pytest.approx(1.0)

    @pytest.mark.parametrize("iterations", [1, 2, 4])
    def test_matches_loop_oracle(self, iterations):
        v = np.random.default_rng(iterations).uniform(0, 1, (4, 5, 6))
        np.testing.assert_allclose(smooth(VisibilityField(AABB, v), iterations).values,
                                   smooth_oracle(v, iterations), atol=1e-14)

    def test_range_and_total_variation(self):
        v = np.random.default_rng(0).uniform(0, 1, (8, 8, 8))
        vf = VisibilityField(AABB, v)
        tv = [total_variation(smooth(vf, k).values) for k in range(6)]
        assert all(b < a for a, b in zip(tv, tv[1:]))
        out = smooth(vf, 5).values
        assert out.min() >= 0 and out.max() <= 1

    def test_negative_iterations(self):
        with pytest.raises(ValueError):
            smooth(VisibilityField(AABB, np.zeros((3, 3, 3))), -1)


class TestQuery:
    def test_node_value(self):
        v = np.random.default_rng(0).uniform(0, 1, (5, 5, 5))
        vf = VisibilityField(AABB, v)
        nodes = vf.node_positions()
        assert query(vf, nodes[1, 3, 2]) == pytest.approx(v[1, 3, 2], abs=1e-12)

    def test_midpoint(self):
        v = np.zeros((2, 2, 2))
        v[0] = 0.2
        v[1] = 0.6
        assert query(VisibilityField(AABB, v), [0.0, 0.3, -0.7]) == pytest.approx(0.4, abs=1e-12)

    def test_all_ones(self):
        vf = VisibilityField(AABB, np.ones((4, 4, 4)))
        pts = np.random.default_rng(1).uniform(-3, 3, (200, 3))
        np.testing.assert_allclose(query(vf, pts), 1.0)

    def test_clamps_outside(self):
        v = np.random.default_rng(2).uniform(0, 1, (3, 3, 3))
        vf = VisibilityField(AABB, v)
        assert query(vf, [5.0, -7.0, 0.0]) == pytest.approx(v[2, 0, 1], abs=1e-12)

    def test_values_must_be_in_range(self):
        with pytest.raises(ValueError):
            VisibilityField(AABB, np.full((2, 2, 2), 1.5))


def test_save_load_round_trip(tmp_path):
    vf = VisibilityField([[0, 0, 0], [1, 2, 3]], np.random.default_rng(0).uniform(0, 1, (3, 4, 5)).astype(np.float32))
    save_visibility(vf, tmp_path / "v.vxrf")
    back = load_visibility(tmp_path / "v.vxrf")
    np.testing.assert_array_equal(back.values, vf.values)
    np.testing.assert_array_equal(back.aabb, vf.aabb)
