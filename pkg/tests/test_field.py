import struct

import numpy as np
import pytest

from scenefuse.camera import make_camera
from scenefuse.field import (
    MAGIC, Ray, RenderSettings, TrainConfig, TrainHistory, VoxelRadianceField, clip_rays_to_box,
    load_field, optimize_field, photometric_loss_and_grad, render_image, render_ray, render_rays,
    sample_field, save_field,
)
from scenefuse.metrics import psnr
from scenefuse.poses import PoseSE3
from scenefuse.scenegen import Placement, Primitive, SceneSpec, render_reference, sample_hemisphere_cameras

from conftest import analytic_field, box_sdf, sphere_sdf


def column_field(sigma_of_z, nz=41, length=4.0):
    """3x3xnz grid over [-1,1]^2 x [0,length] whose density depends on the node height only."""
    aabb = np.array([[-1.0, -1.0, 0.0], [1.0, 1.0, length]])
    z = np.linspace(0.0, length, nz)
    dens = np.broadcast_to(sigma_of_z(z), (3, 3, nz)).copy()
    return VoxelRadianceField(aabb, dens, np.full((3, 3, nz, 3), 0.5))


def quadrature_oracle(sigma_nodes, z_nodes, t0, t1, step):
    """Midpoint samples along +z from z = 0, linear interpolation of node values, no early stop."""
    n = int(np.ceil((t1 - t0) / step - 0.5))
    t = t0 + (np.arange(n) + 0.5) * step
    t = t[t < t1]
    s = np.interp(t, z_nodes, sigma_nodes)
    alpha = 1.0 - np.exp(-s * step)
    trans = np.concatenate([[1.0], np.cumprod(1.0 - alpha)[:-1]])
    w = trans * alpha
    op = w.sum()
    return float((w * t).sum() / max(op, 1e-8)), float(op)


class TestSampleField:
    def test_node_identity(self):
        rng = np.random.default_rng(0)
        fld = VoxelRadianceField([[0, 0, 0], [1, 2, 3]], rng.uniform(0, 5, (4, 5, 6)),
                                 rng.uniform(0, 1, (4, 5, 6, 3)))
        nodes = fld.node_positions()
        for idx in [(0, 0, 0), (3, 4, 5), (1, 2, 3), (2, 0, 4)]:
            c, s = sample_field(fld, nodes[idx])
            assert s == pytest.approx(fld.density[idx], abs=1e-12)
            np.testing.assert_allclose(c, fld.color[idx], atol=1e-12)

    def test_outside_is_empty(self):
        fld = VoxelRadianceField([[0, 0, 0], [1, 1, 1]], np.ones((2, 2, 2)), np.full((2, 2, 2, 3), 0.7))
        c, s = sample_field(fld, [1.5, 0.5, 0.5])
        assert s == 0.0 and np.all(c == 0.0)

    def test_linear_midpoint(self):
        dens = np.zeros((3, 3, 3))
        dens[1, 1, 2] = 2.0
        fld = VoxelRadianceField([[0, 0, 0], [2, 2, 2]], dens, np.zeros((3, 3, 3, 3)))
        _, s = sample_field(fld, [1.0, 1.0, 1.5])
        assert s == pytest.approx(1.0, abs=1e-12)


class TestRenderRay:
    def test_empty_field(self):
        fld = VoxelRadianceField.empty([[-1] * 3, [1] * 3], (5, 5, 5))
        st = RenderSettings(0.2, background_color=(0.1, 0.2, 0.3))
        rgb, depth, op = render_ray(fld, Ray([0, 0, -3.0], [0, 0, 1.0], 0.0, 10.0), st)
        np.testing.assert_allclose(rgb, [0.1, 0.2, 0.3])
        assert op == 0.0

    @pytest.mark.parametrize("sigma", [1.0, 10.0, 100.0, 1e4])
    def test_slab_matches_independent_sum(self, sigma):
        z = np.linspace(0.0, 4.0, 41)
        fld = column_field(lambda zz: np.where(zz >= 2.0 - 1e-12, sigma, 0.0))
        st = RenderSettings(0.05, min_transmittance=0.0)
        _, depth, op = render_ray(fld, Ray([0, 0, 0.0], [0, 0, 1.0], 0.0, 10.0), st)
        ref_depth, ref_op = quadrature_oracle(fld.density[1, 1], z, 0.0, 4.0, 0.05)
        assert depth == pytest.approx(ref_depth, abs=1e-9)
        assert op == pytest.approx(ref_op, abs=1e-9)

    def test_opaque_slab_depth_limit(self):
        fld = column_field(lambda zz: np.where(zz >= 2.0 - 1e-12, 1e9, 0.0))
        st = RenderSettings(0.05, min_transmittance=0.0)
        _, depth, op = render_ray(fld, Ray([0, 0, 0.0], [0, 0, 1.0], 0.0, 10.0), st)
        # first sample with non-zero density sits on the one-voxel ramp before the face
        first = 1.925
        assert depth == pytest.approx(first, abs=1e-6)
        assert abs(depth - 2.0) <= fld.voxel_size
        assert op == pytest.approx(1.0, abs=1e-9)

    @pytest.mark.parametrize("step", [0.05, 0.025, 0.01])
    def test_homogeneous_medium(self, step):
        sigma = 0.6
        fld = column_field(lambda zz: np.full_like(zz, sigma))
        st = RenderSettings(step, min_transmittance=0.0)
        _, _, op = render_ray(fld, Ray([0, 0, -1.0], [0, 0, 1.0], 0.0, 10.0), st)
        assert op == pytest.approx(1.0 - np.exp(-sigma * 4.0), abs=2 * sigma * step)

    def test_ranges_on_random_field(self):
        rng = np.random.default_rng(1)
        fld = VoxelRadianceField([[-1] * 3, [1] * 3], rng.uniform(0, 20, (9, 9, 9)),
                                 rng.uniform(0, 1, (9, 9, 9, 3)))
        o = rng.uniform(-3, 3, (500, 3))
        d = rng.normal(size=(500, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        out = render_rays(fld, o, d, 0.0, 10.0, fld.default_settings())
        assert np.all((out[:, 4] >= 0) & (out[:, 4] <= 1 + 1e-12))
        assert np.all((out[:, :3] >= 0) & (out[:, :3] <= 1 + 1e-12))

    def test_occluder_pulls_depth_forward(self):
        aabb = np.array([[-1.0] * 3, [1.0] * 3])
        back = analytic_field(aabb, 33, box_sdf([-0.5, -0.5, 0.4], [0.5, 0.5, 0.8]))
        both = analytic_field(aabb, 33, lambda p: np.minimum(box_sdf([-0.5, -0.5, 0.4], [0.5, 0.5, 0.8])(p),
                                                             box_sdf([-0.5, -0.5, -0.5], [0.5, 0.5, -0.3])(p)))
        ray = Ray([0.0, 0.0, -3.0], [0.0, 0.0, 1.0], 0.0, 10.0)
        st = back.default_settings()
        d_back = render_ray(back, ray, st)[1]
        d_both = render_ray(both, ray, st)[1]
        assert d_both < d_back
        assert abs(d_both - 2.5) < 2 * back.voxel_size

    def test_step_size_guard(self):
        fld = VoxelRadianceField.empty([[0] * 3, [1] * 3], (5, 5, 5))
        with pytest.raises(ValueError):
            render_ray(fld, Ray([0, 0, -1.0], [0, 0, 1.0], 0.0, 5.0), RenderSettings(0.2))


class TestRenderImage:
    def test_one_pixel_image_is_center_ray(self):
        aabb = np.array([[-1.0] * 3, [1.0] * 3])
        fld = analytic_field(aabb, 17, sphere_sdf([0.1, 0, 0], 0.5))
        cam = make_camera([0, 0.3, -3.0], [0, 0, 0], 1, 1, 30.0)
        st = fld.default_settings()
        img, depth, op = render_image(fld, cam, st)
        o, d = cam.pixel_rays()
        rgb, dep, opc = render_ray(fld, Ray(o[0], d[0], cam.near, cam.far), st)
        np.testing.assert_allclose(img[0, 0], rgb, atol=1e-12)
        assert depth[0, 0] == pytest.approx(dep) and op[0, 0] == pytest.approx(opc)

    def test_empty_field_gives_background(self):
        fld = VoxelRadianceField.empty([[-1] * 3, [1] * 3], (4, 4, 4))
        img, _, op = render_image(fld, make_camera([0, 0, -3], [0, 0, 0], 6, 5, 40.0), fld.default_settings())
        assert img.shape == (5, 6, 3) and np.all(img == 1.0) and np.all(op == 0.0)

    def test_halving_step_changes_render_little(self):
        aabb = np.array([[-1.0] * 3, [1.0] * 3])
        fld = analytic_field(aabb, 33, sphere_sdf([0, 0, 0], 0.6), sigma=30.0)
        cam = make_camera([1.5, -2.0, 2.0], [0, 0, 0], 32, 32, 40.0)
        a = render_image(fld, cam, RenderSettings(0.5 * fld.voxel_size))[0]
        b = render_image(fld, cam, RenderSettings(0.25 * fld.voxel_size))[0]
        assert np.mean(np.abs(a - b)) < 0.02


class TestGradient:
    def _setup(self, seed=0):
        rng = np.random.default_rng(seed)
        aabb = np.array([[0.0] * 3, [1.0] * 3])
        fld = VoxelRadianceField(aabb, rng.uniform(0, 6, (8, 8, 8)), rng.uniform(0.1, 0.9, (8, 8, 8, 3)))
        n = 40
        o = np.c_[rng.uniform(0.2, 0.8, (n, 2)), np.full(n, -1.0)]
        d = np.c_[rng.uniform(-0.15, 0.15, (n, 2)), np.ones(n)]
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        t0, t1 = clip_rays_to_box(o, d, aabb, np.zeros(n), np.full(n, 10.0))
        rays = (o, d, np.c_[t0, t1], rng.uniform(0, 1, (n, 3)))
        return fld, rays, rng.uniform(0, 1, n)

    @pytest.mark.parametrize("distortion", [0.0, 0.3])
    def test_matches_central_differences(self, distortion):
        fld, rays, off = self._setup()
        args = (rays, off, 0.05, np.ones(3), 0.0, None, distortion)
        _, gs, gc = photometric_loss_and_grad(fld, *args)
        h = 1e-5
        for idx in [(3, 4, 2), (4, 4, 5), (2, 3, 6), (4, 3, 3), (5, 5, 4)]:
            base = fld.density[idx]
            fld.density[idx] = base + h
            lp = photometric_loss_and_grad(fld, *args)[0]
            fld.density[idx] = base - h
            lm = photometric_loss_and_grad(fld, *args)[0]
            fld.density[idx] = base
            fd = (lp - lm) / (2 * h)
            assert abs(gs[idx] - fd) <= 1e-3 * max(abs(fd), 1e-8)
        for idx in [(3, 4, 2, 0), (4, 4, 5, 1), (4, 3, 3, 2)]:
            base = fld.color[idx]
            fld.color[idx] = base + h
            lp = photometric_loss_and_grad(fld, *args)[0]
            fld.color[idx] = base - h
            lm = photometric_loss_and_grad(fld, *args)[0]
            fld.color[idx] = base
            fd = (lp - lm) / (2 * h)
            assert abs(gc[idx] - fd) <= 1e-3 * max(abs(fd), 1e-8)


@pytest.fixture(scope="module")
def sphere_run():
    prim = Primitive("sphere", [1.0] * 3, [0.85, 0.85, 0.8])
    scene = SceneSpec(1, [], [Placement(1, prim, PoseSE3.identity())])
    cams = sample_hemisphere_cameras(100, 4.0, (0, 0, 0), 0, 64, 64, 40.0, -80.0)
    hold = sample_hemisphere_cameras(10, 4.0, (0, 0, 0), 99, 64, 64, 40.0, -80.0)
    imgs = np.stack([render_reference(scene, c)[0] for c in cams])
    aabb = np.array([[-1.2] * 3, [1.2] * 3])
    hist = TrainHistory()
    fld = optimize_field(imgs, cams, aabb, TrainConfig(resolution=96, seed=0), hist)
    refs = [render_reference(scene, c)[0] for c in hold]
    st = fld.default_settings()
    scores = [psnr(render_image(fld, c, st)[0], r) for c, r in zip(hold, refs)]
    train_scores = [psnr(render_image(fld, cams[k], st)[0], imgs[k]) for k in range(0, 100, 10)]
    return fld, hist, scores, train_scores, len(range(0, len(cams) * 64 * 64, 8192))


class TestOptimize:
    def test_sphere_heldout_psnr(self, sphere_run):
        _, _, scores, _, _ = sphere_run
        print(f"sphere held-out PSNR {np.mean(scores):.2f} dB (min {np.min(scores):.2f})")
        assert np.mean(scores) >= 25.0

    def test_training_views_reach_28db(self, sphere_run):
        assert np.mean(sphere_run[3]) >= 28.0

    def test_loss_moving_average_non_increasing_per_epoch(self, sphere_run):
        _, hist, _, _, per_epoch = sphere_run
        losses = np.asarray(hist.losses)
        ma = np.convolve(losses, np.ones(10) / 10, mode="valid")
        ends = ma[np.arange(per_epoch, len(losses) + 1, per_epoch) - 10]
        assert np.all(np.diff(ends) <= 1e-12)

    def test_empty_scene_stays_empty(self):
        cams = sample_hemisphere_cameras(12, 3.0, (0, 0, 0), 1, 24, 24)
        imgs = np.ones((12, 24, 24, 3))
        fld = optimize_field(imgs, cams, [[-1] * 3, [1] * 3], TrainConfig(resolution=24, epochs=3))
        assert fld.density.max() < 0.01

    def test_deterministic(self):
        cams = sample_hemisphere_cameras(10, 3.0, (0, 0, 0), 1, 16, 16)
        scene = SceneSpec(1, [], [Placement(1, Primitive("box", [0.3] * 3, [0.2, 0.5, 0.7]), PoseSE3.identity())])
        imgs = np.stack([render_reference(scene, c)[0] for c in cams])
        cfg = TrainConfig(resolution=16, epochs=2, seed=4)
        a = optimize_field(imgs, cams, [[-1] * 3, [1] * 3], cfg)
        b = optimize_field(imgs, cams, [[-1] * 3, [1] * 3], cfg)
        assert np.array_equal(a.density, b.density) and np.array_equal(a.color, b.color)

    def test_input_errors(self):
        cams = sample_hemisphere_cameras(3, 3.0)
        with pytest.raises(ValueError):
            optimize_field(np.ones((2, 64, 64, 3)), cams, [[-1] * 3, [1] * 3])
        with pytest.raises(ValueError):
            optimize_field(np.ones((3, 64, 64, 3)), cams, [[0, 0, 0], [1, 0, 1]])


class TestPersistence:
    def test_round_trip_and_header(self, tmp_path):
        rng = np.random.default_rng(2)
        fld = VoxelRadianceField([[-1, -2, -3], [1, 2, 3]], rng.uniform(0, 9, (3, 4, 5)).astype(np.float32),
                                 rng.uniform(0, 1, (3, 4, 5, 3)).astype(np.float32))
        path = tmp_path / "f.vxrf"
        save_field(fld, path)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<I", raw[4:8])[0] == 1
        assert struct.unpack("<6d", raw[8:56]) == (-1, -2, -3, 1, 2, 3)
        assert struct.unpack("<3I", raw[56:68]) == (3, 4, 5)
        first = np.frombuffer(raw[68:68 + 4 * 60], dtype="<f4")
        np.testing.assert_array_equal(first, fld.density.ravel(order="F").astype(np.float32))
        back = load_field(path)
        np.testing.assert_array_equal(back.density, fld.density)
        np.testing.assert_array_equal(back.color, fld.color)
        np.testing.assert_array_equal(back.aabb, fld.aabb)

    def test_rejects_bad_magic(self, tmp_path):
        path = tmp_path / "bad.vxrf"
        path.write_bytes(b"NOPE" + bytes(100))
        with pytest.raises(ValueError):
            load_field(path)
