"""Per-scene visibility fields: the fraction of training cameras that see a point unoccluded."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from . import _march
from .camera import Camera
from .field import RenderSettings, VoxelRadianceField, _read_grid_file, _write_grid_file

log = logging.getLogger(__name__)

TAU_EMPTY = 0.5


@dataclass(eq=False)
class VisibilityField:
    aabb: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise ValueError("resolution must be at least 2 per axis")
        if np.any(self.aabb[1] <= self.aabb[0]):
            raise ValueError("aabb must have positive extent on every axis")
        if np.any(self.values < 0) or np.any(self.values > 1):
            raise ValueError("visibility values must lie in [0, 1]")

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.values.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / (np.array(self.resolution) - 1)

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.aabb[0, a], self.aabb[1, a], self.resolution[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), -1)


@dataclass(frozen=True)
class VisibilitySettings:
    """Occlusion test knobs; depth_offset defaults to half the march step."""

    render: RenderSettings
    tau_empty: float = TAU_EMPTY
    depth_offset: float | None = None

    @property
    def offset(self) -> float:
        return 0.5 * self.render.step_size if self.depth_offset is None else self.depth_offset


def _camera_arrays(cameras: list[Camera]):
    centers = np.array([c.center for c in cameras])
    rots = np.ascontiguousarray(np.array([c.rotation for c in cameras]))
    intr = np.array([[c.fx, c.fy, c.cx, c.cy, c.width, c.height] for c in cameras], dtype=np.float64)
    nearfar = np.array([[c.near, c.far] for c in cameras], dtype=np.float64)
    return centers, rots, intr, nearfar


def visible_counts(field: VoxelRadianceField, cameras: list[Camera], points,
                   settings: VisibilitySettings) -> np.ndarray:
    """Number of cameras that see each point."""
    settings.render.check(field)
    pts = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    d, c, occ, lo, hi, inv_sp, sp, dims = field.kernel_args()
    centers, rots, intr, nearfar = _camera_arrays(cameras)
    return _march.visibility_counts(d, c, occ, lo, hi, inv_sp, sp, dims, pts, centers, rots, intr, nearfar,
                                    settings.render.step_size, settings.render.sigma_scale,
                                    settings.render.min_transmittance, settings.tau_empty, settings.offset)


def point_visible(field: VoxelRadianceField, x, camera: Camera, settings: VisibilitySettings | RenderSettings) -> int:
    """1 if x is inside the camera's image, in front of it, and not behind the rendered surface."""
    if isinstance(settings, RenderSettings):
        settings = VisibilitySettings(settings)
    return int(visible_counts(field, [camera], np.asarray(x, dtype=np.float64).reshape(1, 3), settings)[0])


def compute_visibility_field(field: VoxelRadianceField, cameras: list[Camera], aabb=None,
                             resolution=64, settings: VisibilitySettings | None = None) -> VisibilityField:
    """Exact per-node fraction of `cameras` for which the node is visible."""
    if len(cameras) < 1:
        raise ValueError("need at least one camera")
    aabb = field.aabb if aabb is None else np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    res = (int(resolution),) * 3 if np.ndim(resolution) == 0 else tuple(int(r) for r in resolution)
    settings = settings or VisibilitySettings(field.default_settings(min_transmittance=1e-4))
    grid = VisibilityField(aabb, np.zeros(res))
    start = time.perf_counter()
    counts = visible_counts(field, cameras, grid.node_positions().reshape(-1, 3), settings)
    grid.values = counts.reshape(res) / len(cameras)
    log.info("visibility %s over %d cameras in %.1fs", res, len(cameras), time.perf_counter() - start)
    return grid


def smooth(vf: VisibilityField, iterations: int) -> VisibilityField:
    """Synchronous 6-neighbour averaging; boundary nodes average only the neighbours they have."""
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    v = vf.values.copy()
    nbrs = np.zeros_like(v)
    for a in range(3):
        n = v.shape[a]
        idx = [slice(None)] * 3
        idx[a] = slice(1, n - 1)
        nbrs[tuple(idx)] += 2
        idx[a] = 0
        nbrs[tuple(idx)] += 1
        idx[a] = n - 1
        nbrs[tuple(idx)] += 1
    for _ in range(iterations):
        acc = np.zeros_like(v)
        for a in range(3):
            hi = [slice(None)] * 3
            lo = [slice(None)] * 3
            hi[a], lo[a] = slice(1, None), slice(None, -1)
            acc[tuple(lo)] += v[tuple(hi)]
            acc[tuple(hi)] += v[tuple(lo)]
        v = np.clip(acc / nbrs, 0.0, 1.0)
    return VisibilityField(vf.aabb, v)


def query(vf: VisibilityField, x) -> np.ndarray | float:
    """Trilinear lookup with points clamped into the box."""
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    out = _march.sample_scalar_clamped(vf.values, vf.aabb[0].copy(), 1.0 / vf.spacing,
                                       np.array(vf.resolution, dtype=np.int64),
                                       np.ascontiguousarray(pts.reshape(-1, 3)))
    return float(out[0]) if single else out


def save_visibility(vf: VisibilityField, path) -> None:
    _write_grid_file(path, vf.aabb, [vf.values])


def load_visibility(path) -> VisibilityField:
    aabb, grids = _read_grid_file(path)
    if len(grids) != 1:
        raise ValueError(f"{path}: expected a single channel, found {len(grids)}")
    return VisibilityField(aabb, np.clip(grids[0], 0.0, 1.0))
