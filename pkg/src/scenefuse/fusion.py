"""Visibility-weighted blending of aligned per-scene fields into a clean background and whole objects."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .camera import Camera
from .field import RenderSettings, VoxelRadianceField, clip_rays_to_box, sample_field_points
from .geometry import NearestIndex, PointCloud
from .poses import PoseSE3, PoseSim3
from .visibility import VisibilityField, query

EPS_VIS = 1e-6
DEFAULT_P = 16.0
BACKGROUND = "background"


@dataclass(eq=False)
class AlignedScene:
    field: VoxelRadianceField
    visibility: VisibilityField
    to_reference: PoseSim3                  # scene frame -> reference frame

    def __post_init__(self):
        self._from_reference = self.to_reference.inverse()

    @property
    def from_reference(self) -> PoseSim3:
        return self._from_reference


@dataclass(eq=False)
class ExclusionZone:
    """Points within `radius` of the clean background surface (reference frame).

    Object fusion ignores a scene wherever its point falls in this zone, which keeps the
    support surface out of object renders the same way the foreground diff does. Where every
    scene is excluded the zone is waived, so contact faces still get some content.
    """

    cloud: PointCloud
    radius: float

    def __post_init__(self):
        if len(self.cloud) == 0 or not self.radius > 0:
            raise ValueError("need a non-empty cloud and a positive radius")
        self._index = NearestIndex(self.cloud.points)

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d, _ = self._index.query(pts, distance_upper_bound=self.radius)
        return d <= self.radius


@dataclass(eq=False)
class FusionContext:
    scenes: list[AlignedScene]
    p: float = DEFAULT_P
    object_poses: dict[int, list[PoseSE3 | None]] = field(default_factory=dict)
    object_bounds: dict[int, np.ndarray] = field(default_factory=dict)   # reference object frame
    exclusion: ExclusionZone | None = None

    def __post_init__(self):
        if not self.scenes:
            raise ValueError("need at least one scene")
        if not self.p >= 1:
            raise ValueError("p must be >= 1")
        for j, poses in self.object_poses.items():
            if len(poses) != len(self.scenes):
                raise ValueError(f"object {j}: need one pose slot per scene")

    @property
    def reference_aabb(self) -> np.ndarray:
        return self.scenes[0].field.aabb

    @property
    def voxel_size(self) -> float:
        """Smallest voxel edge across scenes, in reference units."""
        return min(s.field.voxel_size * s.to_reference.scale for s in self.scenes)

    def default_settings(self, **kw) -> RenderSettings:
        return RenderSettings(step_size=0.5 * self.voxel_size, **kw)

    def target_bounds(self, target) -> np.ndarray:
        if target == BACKGROUND:
            return self.reference_aabb
        if target not in self.object_bounds:
            raise KeyError(f"unknown object id {target}")
        return self.object_bounds[target]


def fusion_weights(visibilities, p: float, available=None) -> np.ndarray:
    """Normalized v**p along the last axis; uniform where no scene sees the point.

    With an `available` mask, excluded scenes get zero weight and rows with nothing
    available are all zero.
    """
    if not p >= 1:
        raise ValueError("p must be >= 1")
    v = np.asarray(visibilities, dtype=np.float64)
    if available is None:
        available = np.ones(v.shape, dtype=bool)
    v = np.where(available, v, 0.0)
    vmax = v.max(axis=-1, keepdims=True)
    blind = vmax <= EPS_VIS
    ratio = np.where(blind, 1.0, v / np.where(blind, 1.0, vmax)) ** p
    ratio = np.where(available, ratio, 0.0)
    total = ratio.sum(axis=-1, keepdims=True)
    return ratio / np.where(total > 0, total, 1.0)


def scene_positions(ctx: FusionContext, pts: np.ndarray, target) -> tuple[list[np.ndarray | None], np.ndarray]:
    """Per scene, where the reference-frame points land in that scene's native frame.

    Also returns a (points, scenes) mask of which scene may contribute where.
    """
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    out = []
    if target == BACKGROUND:
        for sc in ctx.scenes:
            out.append(sc.from_reference.apply(pts))
        return out, np.ones((len(pts), len(ctx.scenes)), dtype=bool)
    if target not in ctx.object_poses:
        raise KeyError(f"unknown object id {target}")
    b = ctx.target_bounds(target)
    inside = np.all((pts >= b[0]) & (pts <= b[1]), axis=1)
    avail = np.zeros((len(pts), len(ctx.scenes)), dtype=bool)
    for i, (sc, pose) in enumerate(zip(ctx.scenes, ctx.object_poses[target])):
        if pose is None:
            out.append(None)
            continue
        in_scene = pose.apply(pts)
        out.append(sc.from_reference.apply(in_scene))
        avail[:, i] = inside
        if ctx.exclusion is not None:
            avail[inside, i] = ~ctx.exclusion.contains(in_scene[inside])
    if ctx.exclusion is not None:
        slots = np.array([pose is not None for pose in ctx.object_poses[target]])
        waived = inside & ~avail.any(axis=1)
        avail[np.ix_(waived, slots)] = True
    return out, avail


def fused_sample_points(ctx: FusionContext, pts, target=BACKGROUND, return_weights: bool = False):
    """Blended (sigma, color) at reference-frame points, in reference density units."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    native, avail = scene_positions(ctx, pts, target)
    n, k = len(pts), len(ctx.scenes)
    sig = np.zeros((n, k))
    col = np.zeros((n, k, 3))
    vis = np.zeros((n, k))
    for i, (sc, x) in enumerate(zip(ctx.scenes, native)):
        if x is None:
            continue
        s = sample_field_points(sc.field, x)
        sig[:, i] = s[:, 0] / sc.to_reference.scale
        col[:, i] = s[:, 1:]
        vis[:, i] = query(sc.visibility, x)
    w = fusion_weights(vis, ctx.p, avail)
    sigma = np.einsum("nk,nk->n", w, sig)
    color = np.einsum("nk,nkc->nc", w, col)
    if return_weights:
        return sigma, color, w
    return sigma, color


def fused_sample_background(x, ctx: FusionContext):
    sigma, color = fused_sample_points(ctx, np.reshape(x, (1, 3)), BACKGROUND)
    return color[0], float(sigma[0])


def fused_sample_object(x_j, j: int, ctx: FusionContext):
    sigma, color = fused_sample_points(ctx, np.reshape(x_j, (1, 3)), j)
    return color[0], float(sigma[0])


def composite(sigma: np.ndarray, color: np.ndarray, ts: np.ndarray, valid: np.ndarray, step: float,
              bg: np.ndarray, t_stop: float):
    """Alpha compositing of per-ray sample stacks, shape (rays, samples), with the march's stop rule."""
    alpha = np.where(valid, 1.0 - np.exp(-sigma * step), 0.0)
    trans = np.cumprod(1.0 - alpha, axis=1)
    before = np.concatenate([np.ones((len(alpha), 1)), trans[:, :-1]], axis=1)
    live = before >= t_stop
    w = np.where(live, before * alpha, 0.0)
    # transmittance is non-increasing, so live samples form a prefix; keep T after its last one
    final = np.where(live, trans, np.inf).min(axis=1)
    rgb = np.einsum("rs,rsc->rc", w, color) + final[:, None] * bg
    op = w.sum(axis=1)
    depth = (w * ts).sum(axis=1) / np.maximum(op, 1e-8)
    return rgb, depth, op


def render_fused_rays(ctx: FusionContext, origins, dirs, near, far, target=BACKGROUND,
                      settings: RenderSettings | None = None, chunk: int = 1024,
                      on_weights: Callable[[np.ndarray], None] | None = None) -> np.ndarray:
    """(n, 5) array of (r, g, b, depth, opacity) for rays in the reference frame."""
    settings = settings or ctx.default_settings()
    step = settings.step_size
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    n = len(origins)
    near = np.broadcast_to(np.asarray(near, dtype=np.float64), (n,))
    far = np.broadcast_to(np.asarray(far, dtype=np.float64), (n,))
    box = ctx.target_bounds(target)
    t0, t1 = clip_rays_to_box(origins, dirs, box, near, far)
    out = np.zeros((n, 5))
    out[:, :3] = settings.bg
    hit = np.flatnonzero(t0 < t1)
    for s in range(0, len(hit), chunk):
        idx = hit[s:s + chunk]
        a, b = t0[idx], t1[idx]
        ns = int(np.max(np.ceil((b - a) / step - 0.5))) + 1
        k = np.arange(ns)
        ts = a[:, None] + (k[None, :] + 0.5) * step
        valid = ts < b[:, None]
        pts = origins[idx, None, :] + ts[..., None] * dirs[idx, None, :]
        flat = pts[valid]
        sig = np.zeros(valid.shape)
        col = np.zeros(valid.shape + (3,))
        if len(flat):
            if on_weights is not None:
                fs, fc, w = fused_sample_points(ctx, flat, target, return_weights=True)
                on_weights(w)
            else:
                fs, fc = fused_sample_points(ctx, flat, target)
            sig[valid] = fs * settings.sigma_scale
            col[valid] = fc
        rgb, depth, op = composite(sig, col, ts, valid, step, settings.bg, settings.min_transmittance)
        out[idx, :3], out[idx, 3], out[idx, 4] = rgb, depth, op
    return out


def render_fused(camera: Camera, ctx: FusionContext, target=BACKGROUND, settings: RenderSettings | None = None,
                 on_weights: Callable[[np.ndarray], None] | None = None):
    """(image, depth, opacity) of the fused background or object `target` seen from `camera`."""
    o, d = camera.pixel_rays()
    out = render_fused_rays(ctx, o, d, camera.near, camera.far, target, settings, on_weights=on_weights)
    shape = (camera.height, camera.width)
    return out[:, :3].reshape(*shape, 3), out[:, 3].reshape(shape), out[:, 4].reshape(shape)


def export_scene_labels(cloud: PointCloud, ctx: FusionContext, target=BACKGROUND) -> PointCloud:
    """Label each point with the 1-based index of the scene that sees it best (lowest index on ties)."""
    native, _ = scene_positions(ctx, cloud.points, target)
    vis = np.full((len(cloud), len(ctx.scenes)), -1.0)
    for i, (sc, x) in enumerate(zip(ctx.scenes, native)):
        if x is not None:
            vis[:, i] = query(sc.visibility, x)
    return cloud.with_labels((np.argmax(vis, axis=1) + 1).astype(np.uint8))


def object_bounds_from_clouds(clouds: list[PointCloud | None], poses: list[PoseSE3 | None],
                              margin: float) -> np.ndarray:
    """Box in the reference object frame covering every scene's cloud pulled back through its pose."""
    pts = [pose.inverse().apply(c.points) for c, pose in zip(clouds, poses)
           if c is not None and pose is not None and len(c)]
    if not pts:
        raise ValueError("no clouds to bound")
    allp = np.concatenate(pts)
    return np.stack([allp.min(axis=0) - margin, allp.max(axis=0) + margin])
