import numpy as np
import pytest

from scenefuse.camera import make_camera
from scenefuse.field import VoxelRadianceField
from scenefuse.geometry import PointCloud
from scenefuse.poses import PoseSE3
from scenefuse.scenegen import Primitive, primitive_surface_samples


def analytic_field(aabb, res, sdf, sigma=50.0, color=(0.8, 0.3, 0.2)):
    """Voxel field with density `sigma` wherever sdf(nodes) < 0."""
    fld = VoxelRadianceField.empty(aabb, (res,) * 3 if np.ndim(res) == 0 else res)
    nodes = fld.node_positions()
    inside = sdf(nodes.reshape(-1, 3)).reshape(fld.resolution) < 0
    dens = np.where(inside, sigma, 0.0)
    col = np.broadcast_to(np.asarray(color, dtype=np.float64), fld.color.shape).copy()
    return VoxelRadianceField(aabb, dens, col)


def sphere_sdf(center, radius):
    c = np.asarray(center, dtype=np.float64)
    return lambda p: np.linalg.norm(p - c, axis=1) - radius


def box_sdf(lo, hi):
    lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
    return lambda p: np.max(np.maximum(lo - p, p - hi), axis=1)


def primitive_cloud(prim: Primitive, count: int, seed: int, noise: float = 0.0) -> PointCloud:
    pts, nrm = primitive_surface_samples(prim, count, seed)
    if noise:
        pts = pts + np.random.default_rng(seed + 1).normal(0.0, noise, pts.shape)
    return PointCloud(pts, nrm)


def lopsided_cloud(count=3000, seed=0, noise=0.0):
    """A box with a sphere stuck to one corner: no rotational symmetry."""
    box = primitive_cloud(Primitive("box", [0.15, 0.1, 0.06], [0.5] * 3), count, seed, noise)
    ball = primitive_cloud(Primitive("sphere", [0.05] * 3, [0.5] * 3), count // 3, seed + 7, noise)
    ball = ball.transformed(PoseSE3(np.eye(3), [0.12, 0.07, 0.09]))
    keep = np.linalg.norm(box.points - [0.12, 0.07, 0.09], axis=1) > 0.05
    return PointCloud.concatenate([box.subset(keep), ball])


@pytest.fixture
def unit_box():
    return np.array([[-1.0, -1.0, -1.0], [1.0, 1.0, 1.0]])


@pytest.fixture
def front_camera():
    return make_camera([0.0, 0.0, -4.0], [0.0, 0.0, 0.0], 9, 9, 30.0, near=0.1, far=20.0)


CRITERIA = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[CRITERIA] = []


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(CRITERIA, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for the summary, then assert."""
    def record(label: str, ok: bool, detail: str):
        line = f"criterion {label:<3} {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[CRITERIA].append(line)
        print(line)
        assert ok, line
    return record
