"""Dense voxel radiance field: trilinear sampling, volume rendering and photometric fitting."""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field as dc_field
from functools import cached_property

import numpy as np

from . import _march
from .camera import Camera

log = logging.getLogger(__name__)

MAGIC = b"VXRF"
VERSION = 1
DEPTH_EPS = 1e-8


@dataclass(eq=False)
class VoxelRadianceField:
    """Node-aligned grids of density (1/length) and albedo over an axis-aligned box."""

    aabb: np.ndarray      # (2, 3)
    density: np.ndarray   # (Dx, Dy, Dz)
    color: np.ndarray     # (Dx, Dy, Dz, 3)

    def __post_init__(self):
        self.aabb = np.asarray(self.aabb, dtype=np.float64).reshape(2, 3)
        self.density = np.ascontiguousarray(self.density, dtype=np.float64)
        self.color = np.ascontiguousarray(self.color, dtype=np.float64)
        if np.any(self.aabb[1] <= self.aabb[0]):
            raise ValueError("aabb must have positive extent on every axis")
        if self.density.ndim != 3 or min(self.density.shape) < 2:
            raise ValueError("resolution must be at least 2 per axis")
        if self.color.shape != self.density.shape + (3,):
            raise ValueError("color grid must match density grid")
        if not np.all(np.isfinite(self.density)) or np.any(self.density < 0):
            raise ValueError("density must be finite and non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color must lie in [0, 1]")

    @classmethod
    def empty(cls, aabb, resolution, color=0.5) -> "VoxelRadianceField":
        res = tuple(int(r) for r in resolution)
        return cls(aabb, np.zeros(res), np.full(res + (3,), color, dtype=np.float64))

    @property
    def resolution(self) -> tuple[int, int, int]:
        return self.density.shape

    @property
    def spacing(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / (np.array(self.resolution) - 1)

    @property
    def voxel_size(self) -> float:
        return float(self.spacing.min())

    def node_positions(self) -> np.ndarray:
        axes = [np.linspace(self.aabb[0, a], self.aabb[1, a], self.resolution[a]) for a in range(3)]
        g = np.meshgrid(*axes, indexing="ij")
        return np.stack(g, -1)

    @cached_property
    def occupancy(self) -> np.ndarray:
        return _march.occupancy_from_density(self.density)

    def kernel_args(self):
        sp = self.spacing
        return (self.density, self.color, self.occupancy, self.aabb[0].copy(), self.aabb[1].copy(),
                1.0 / sp, sp, np.array(self.resolution, dtype=np.int64))

    def default_settings(self, **kw) -> "RenderSettings":
        return RenderSettings(step_size=0.5 * self.voxel_size, **kw)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not 0 <= self.t_near < self.t_far:
            raise ValueError("need 0 <= t_near < t_far")


@dataclass(frozen=True)
class RenderSettings:
    step_size: float
    background_color: tuple = (1.0, 1.0, 1.0)
    sigma_scale: float = 1.0
    min_transmittance: float = 1e-7

    def __post_init__(self):
        if not self.step_size > 0 or not self.sigma_scale > 0:
            raise ValueError("step_size and sigma_scale must be positive")

    def check(self, fld: VoxelRadianceField) -> None:
        if self.step_size > 0.5 * fld.voxel_size * (1 + 1e-9):
            raise ValueError("step_size must not exceed half the smallest voxel edge")

    @property
    def bg(self) -> np.ndarray:
        return np.asarray(self.background_color, dtype=np.float64)


def sample_field(fld: VoxelRadianceField, x) -> tuple[np.ndarray, float]:
    """Trilinear (color, sigma) at a point; zero color and density outside the box."""
    out = sample_field_points(fld, np.asarray(x, dtype=np.float64).reshape(1, 3))[0]
    return out[1:], float(out[0])


def sample_field_points(fld: VoxelRadianceField, pts: np.ndarray) -> np.ndarray:
    """(n, 4) array of (sigma, r, g, b)."""
    sp = fld.spacing
    return _march.sample_points(fld.density, fld.color, fld.aabb[0].copy(), 1.0 / sp,
                                np.array(fld.resolution, dtype=np.int64),
                                np.ascontiguousarray(pts, dtype=np.float64).reshape(-1, 3))


def render_rays(fld: VoxelRadianceField, origins, dirs, near, far, settings: RenderSettings) -> np.ndarray:
    """(n, 5) array of (r, g, b, depth, opacity)."""
    settings.check(fld)
    origins = np.ascontiguousarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,)).copy()
    d, c, occ, lo, hi, inv_sp, sp, dims = fld.kernel_args()
    return _march.render_rays(d, c, occ, lo, hi, inv_sp, sp, dims, origins, dirs, near, far,
                              settings.step_size, settings.bg, settings.sigma_scale,
                              settings.min_transmittance)


def render_ray(fld: VoxelRadianceField, ray: Ray, settings: RenderSettings):
    """(rgb, depth, opacity) for one ray."""
    out = render_rays(fld, ray.origin, ray.direction, ray.t_near, ray.t_far, settings)[0]
    return out[:3], float(out[3]), float(out[4])


def render_image(fld: VoxelRadianceField, camera: Camera, settings: RenderSettings):
    """(image (H, W, 3), depth (H, W), opacity (H, W)) with one ray per pixel center."""
    o, d = camera.pixel_rays()
    out = render_rays(fld, o, d, camera.near, camera.far, settings)
    shape = (camera.height, camera.width)
    return out[:, :3].reshape(*shape, 3), out[:, 3].reshape(shape), out[:, 4].reshape(shape)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    resolution: tuple | int = 96    # int: nodes along the longest axis, others proportional
    epochs: int = 8
    batch_size: int = 8192
    lr_density: float = 0.5
    lr_color: float = 0.08
    tv_weight: float = 0.05
    init_thickness: float = 0.01      # initial density * voxel edge
    prune_thickness: float = 0.02     # density * voxel edge below this is zeroed at export
    occupancy_warmup: int = 2         # epochs before empty blocks are skipped
    seed: int = 0
    background_color: tuple = (1.0, 1.0, 1.0)
    min_transmittance: float = 1e-4
    random_background: bool = True    # rays that hit content see a random backdrop, so leaks cost loss
    distortion_weight: float = 0.0    # pulls each ray's compositing weight into a short depth interval
    log_every: int = 0


@dataclass
class TrainHistory:
    losses: list = dc_field(default_factory=list)
    seconds: float = 0.0


def grid_resolution(aabb: np.ndarray, resolution) -> tuple[int, int, int]:
    if np.ndim(resolution) == 0:
        ext = aabb[1] - aabb[0]
        voxel = ext.max() / (int(resolution) - 1)
        return tuple(int(max(2, round(e / voxel) + 1)) for e in ext)
    return tuple(int(r) for r in resolution)


def _softplus(x):
    return np.where(x > 0, x + np.log1p(np.exp(-np.abs(x))), np.log1p(np.exp(np.minimum(x, 0))))


def _inv_softplus(y):
    return np.log(np.expm1(y))


def gather_rays(images, cameras, aabb):
    """Stack all pixel rays clipped to the box; rays missing it are dropped."""
    os_, ds, ts, cs = [], [], [], []
    for img, cam in zip(images, cameras):
        o, d = cam.pixel_rays()
        t0, t1 = clip_rays_to_box(o, d, aabb, cam.near, cam.far)
        keep = t0 < t1
        os_.append(o[keep])
        ds.append(d[keep])
        ts.append(np.stack([t0[keep], t1[keep]], 1))
        cs.append(np.asarray(img, dtype=np.float64).reshape(-1, 3)[keep])
    return (np.concatenate(os_), np.concatenate(ds), np.concatenate(ts), np.concatenate(cs))


def clip_rays_to_box(o, d, aabb, near, far):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        ta = (aabb[0] - o) * inv
        tb = (aabb[1] - o) * inv
    lo = np.where(d == 0, np.where((o >= aabb[0]) & (o <= aabb[1]), -np.inf, np.inf), np.minimum(ta, tb))
    hi = np.where(d == 0, np.where((o >= aabb[0]) & (o <= aabb[1]), np.inf, -np.inf), np.maximum(ta, tb))
    t0 = np.maximum(lo.max(axis=1), near)
    t1 = np.minimum(hi.min(axis=1), far)
    return t0, t1


def photometric_loss_and_grad(fld: VoxelRadianceField, rays, offsets, step, bg, t_stop=0.0,
                              occupancy=None, distortion_weight=0.0):
    """Mean squared error (plus weighted mean distortion) over the rays and its gradient
    w.r.t. node sigma and color."""
    o, d, ts, target = rays
    sp = fld.spacing
    occ = np.ones_like(fld.occupancy) if occupancy is None else occupancy
    gs = np.zeros_like(fld.density)
    gc = np.zeros_like(fld.color)
    batch = np.arange(len(o), dtype=np.int64)
    sse, dist = _march.photometric_backward(
        fld.density, fld.color, occ, fld.aabb[0].copy(), 1.0 / sp, sp,
        np.array(fld.resolution, dtype=np.int64), o, d, ts[:, 0].copy(), ts[:, 1].copy(), target,
        np.asarray(offsets, dtype=np.float64), batch, step,
        np.ascontiguousarray(np.broadcast_to(np.asarray(bg, dtype=np.float64), (len(batch), 3))), t_stop,
        distortion_weight, gs, gc)
    return sse / (3 * len(o)) + distortion_weight * dist / len(o), gs, gc


def optimize_field(images, cameras: list[Camera], aabb, config: TrainConfig | None = None,
                   history: TrainHistory | None = None) -> VoxelRadianceField:
    """Fit a voxel field to calibrated images by Adam on softplus density / logistic color."""
    cfg = config or TrainConfig()
    if len(images) != len(cameras):
        raise ValueError(f"{len(images)} images but {len(cameras)} cameras")
    aabb = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    if np.any(aabb[1] <= aabb[0]):
        raise ValueError("degenerate aabb")
    res = grid_resolution(aabb, cfg.resolution)
    spacing = (aabb[1] - aabb[0]) / (np.array(res) - 1)
    voxel = float(spacing.min())
    k_scale = 1.0 / voxel
    step = 0.5 * voxel
    rng = np.random.default_rng(cfg.seed)
    bg = np.asarray(cfg.background_color, dtype=np.float64)

    o, d, ts, target = gather_rays(images, cameras, aabb)
    t0s, t1s = ts[:, 0].copy(), ts[:, 1].copy()
    n_rays = len(o)
    hits = np.any(target != bg, axis=1) if cfg.random_background else np.zeros(n_rays, dtype=bool)
    raw_s = np.full(res, _inv_softplus(cfg.init_thickness))
    raw_c = np.zeros(res + (3,))
    sigma = k_scale * _softplus(raw_s)
    color = 1.0 / (1.0 + np.exp(-raw_c))
    m_s, v_s = np.zeros_like(raw_s), np.zeros_like(raw_s)
    m_c, v_c = np.zeros_like(raw_c), np.zeros_like(raw_c)
    gs = np.zeros_like(raw_s)
    gc = np.zeros_like(raw_c)
    lo, inv_sp = aabb[0].copy(), 1.0 / spacing
    dims = np.array(res, dtype=np.int64)
    occ_full = np.ones(_march.occupancy_from_density(np.zeros(res)).shape, dtype=np.uint8)
    occ = occ_full
    b1, b2, eps = 0.9, 0.99, 1e-8
    it = 0
    hist = history if history is not None else TrainHistory()
    start = time.perf_counter()
    log.info("training %s grid on %d rays", res, n_rays)
    for epoch in range(cfg.epochs):
        if epoch >= cfg.occupancy_warmup:
            occ = _march.occupancy_from_density(sigma, cfg.prune_thickness * k_scale)
        perm = rng.permutation(n_rays)
        epoch_loss = 0.0
        for s in range(0, n_rays, cfg.batch_size):
            batch = perm[s:s + cfg.batch_size].astype(np.int64)
            offsets = rng.uniform(0.0, 1.0, size=len(batch))
            bgs = np.where(hits[batch, None], rng.uniform(0.0, 1.0, size=(len(batch), 3)), bg)
            gs[:] = 0.0
            gc[:] = 0.0
            sse, dist = _march.photometric_backward(sigma, color, occ, lo, inv_sp, spacing, dims, o, d, t0s,
                                                    t1s, target, offsets, batch, step, bgs,
                                                    cfg.min_transmittance, cfg.distortion_weight, gs, gc)
            tv = 0.0
            if cfg.tv_weight > 0:
                # penalty lives on softplus units; convert its gradient back to sigma units
                g_tv = np.zeros_like(raw_s)
                tv = _march.tv_gradient(sigma / k_scale, cfg.tv_weight, g_tv)
                gs += g_tv / k_scale
            it += 1
            bc1, bc2 = 1 - b1 ** it, 1 - b2 ** it
            _march.adam_density(raw_s, gs, m_s, v_s, cfg.lr_density, b1, b2, eps, bc1, bc2, k_scale, sigma)
            _march.adam_color(raw_c, gc, m_c, v_c, cfg.lr_color, b1, b2, eps, bc1, bc2, color)
            loss = sse / (3 * len(batch)) + tv + cfg.distortion_weight * dist / len(batch)
            hist.losses.append(loss)
            epoch_loss += sse
            if cfg.log_every and it % cfg.log_every == 0:
                log.info("iter %d loss %.5f", it, loss)
        log.info("epoch %d mse %.6f", epoch, epoch_loss / (3 * n_rays))
    hist.seconds = time.perf_counter() - start
    sigma = np.where(sigma * voxel < cfg.prune_thickness, 0.0, sigma)
    return VoxelRadianceField(aabb, sigma, np.clip(color, 0.0, 1.0))


# ---------------------------------------------------------------------------
# persistence: magic, version u32, aabb 6 x f64, resolution 3 x u32, then grids as
# little-endian f32 with x varying fastest (density, then color per channel); the
# channel count follows from the file size

def _write_grid_file(path, aabb, grids: list[np.ndarray]) -> None:
    res = grids[0].shape
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<6d", *np.asarray(aabb, dtype=np.float64).reshape(-1)))
        fh.write(struct.pack("<3I", *res))
        for g in grids:
            fh.write(np.asarray(g, dtype="<f4").ravel(order="F").tobytes())


def _read_grid_file(path):
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a grid file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        aabb = np.array(struct.unpack("<6d", fh.read(48))).reshape(2, 3)
        res = struct.unpack("<3I", fh.read(12))
        payload = fh.read()
    n = int(np.prod(res))
    if n == 0 or len(payload) % (4 * n):
        raise ValueError(f"{path}: truncated grid payload")
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    grids = [flat[c * n:(c + 1) * n].reshape(res, order="F") for c in range(len(flat) // n)]
    return aabb, grids


def save_field(fld: VoxelRadianceField, path) -> None:
    _write_grid_file(path, fld.aabb, [fld.density] + [fld.color[..., c] for c in range(3)])


def load_field(path) -> VoxelRadianceField:
    aabb, grids = _read_grid_file(path)
    if len(grids) != 4:
        raise ValueError(f"{path}: expected 4 channels, found {len(grids)}")
    return VoxelRadianceField(aabb, np.maximum(grids[0], 0.0),
                              np.clip(np.stack(grids[1:], -1), 0.0, 1.0))
