"""Procedural desk scenes, hemisphere camera rigs and an analytic ray tracer for ground truth.

Scenes are built in a canonical world frame. Each scene of a set additionally carries a
Sim(3) frame perturbation (world -> scene frame) that its cameras are re-expressed in, which
models independent reconstructions that disagree on frame and scale.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, look_at
from .poses import PoseSE3, PoseSim3, rotation_from_axis_angle

SHAPES = ("sphere", "box", "cylinder")
BACKGROUND_COLOR = np.ones(3)


@dataclass(frozen=True, eq=False)
class Primitive:
    shape: str
    half_extents: np.ndarray
    albedo: np.ndarray

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=np.float64).reshape(3)
        al = np.asarray(self.albedo, dtype=np.float64).reshape(3)
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        if np.any(he <= 0):
            raise ValueError("half extents must be positive")
        if np.any(al < 0) or np.any(al > 1):
            raise ValueError("albedo must lie in [0, 1]")
        if self.shape == "sphere" and not np.allclose(he, he[0]):
            raise ValueError("sphere needs equal half extents")
        if self.shape == "cylinder" and not np.isclose(he[0], he[1]):
            raise ValueError("cylinder needs a circular cross-section (hx == hy)")
        object.__setattr__(self, "half_extents", he)
        object.__setattr__(self, "albedo", al)

    def to_dict(self) -> dict:
        return {"shape": self.shape, "half_extents": self.half_extents.tolist(),
                "albedo": self.albedo.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["shape"], d["half_extents"], d["albedo"])


@dataclass(frozen=True, eq=False)
class Placement:
    """A primitive posed in the world; object_id 0 marks background."""

    object_id: int
    primitive: Primitive
    pose: PoseSE3  # local -> world

    def to_dict(self) -> dict:
        return {"id": self.object_id, **self.primitive.to_dict(), "pose": self.pose.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "Placement":
        return cls(int(d["id"]), Primitive.from_dict(d), PoseSE3.from_dict(d["pose"]))


@dataclass(eq=False)
class SceneSpec:
    scene_id: int
    background: list[Placement]
    objects: list[Placement]

    def __post_init__(self):
        ids = [o.object_id for o in self.objects]
        if sorted(ids) != list(range(1, len(ids) + 1)):
            raise ValueError("object ids must be 1..M and unique")

    @property
    def placements(self) -> list[Placement]:
        return list(self.background) + list(self.objects)

    def without_objects(self) -> "SceneSpec":
        return SceneSpec(self.scene_id, self.background, [])

    def only_object(self, object_id: int) -> "SceneSpec":
        obj = [o for o in self.objects if o.object_id == object_id]
        if not obj:
            raise KeyError(object_id)
        return SceneSpec(self.scene_id, [], [Placement(1, obj[0].primitive, obj[0].pose)])

    def to_dict(self) -> dict:
        return {"scene_id": self.scene_id,
                "background": [b.to_dict() for b in self.background],
                "objects": [o.to_dict() for o in self.objects]}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(int(d["scene_id"]), [Placement.from_dict(b) for b in d["background"]],
                   [Placement.from_dict(o) for o in d["objects"]])


# ---------------------------------------------------------------------------
# analytic ray casting

def _hit_sphere(o, d, he, t_min):
    r = he[0]
    b = np.einsum("ij,ij->i", o, d)
    c = np.einsum("ij,ij->i", o, o) - r * r
    disc = b * b - c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > t_min, t0, np.where(t1 > t_min, t1, np.inf))
    t = np.where(ok, t, np.inf)
    n = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
    return t, n


def _hit_box(o, d, he, t_min):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-he - o) * inv
        t2 = (he - o) * inv
    # zero direction components: inside slab -> unbounded, outside -> miss
    par = d == 0
    inside = np.abs(o) <= he
    lo = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    t_enter = lo.max(axis=1)
    t_exit = hi.min(axis=1)
    hit = t_exit >= np.maximum(t_enter, t_min)
    use_enter = t_enter > t_min
    t = np.where(hit, np.where(use_enter, t_enter, t_exit), np.inf)
    axis = np.where(use_enter, lo.argmax(axis=1), hi.argmin(axis=1))
    n = np.zeros_like(o)
    rows = np.arange(len(o))
    sgn = np.where(use_enter, -np.sign(d[rows, axis]), np.sign(d[rows, axis]))
    n[rows, axis] = sgn
    return t, n


def _hit_cylinder(o, d, he, t_min):
    r, h = he[0], he[2]
    a = d[:, 0] ** 2 + d[:, 1] ** 2
    b = 2 * (o[:, 0] * d[:, 0] + o[:, 1] * d[:, 1])
    c = o[:, 0] ** 2 + o[:, 1] ** 2 - r * r
    best = np.full(len(o), np.inf)
    with np.errstate(divide="ignore", invalid="ignore"):
        disc = b * b - 4 * a * c
        ok = (disc >= 0) & (a > 0)
        sq = np.sqrt(np.where(ok, disc, 0.0))
        for t in ((-b - sq) / (2 * a), (-b + sq) / (2 * a)):
            z = o[:, 2] + t * d[:, 2]
            valid = ok & (t > t_min) & (np.abs(z) <= h)
            best = np.where(valid & (t < best), t, best)
        for zc in (-h, h):
            t = (zc - o[:, 2]) / d[:, 2]
            x = o[:, 0] + t * d[:, 0]
            y = o[:, 1] + t * d[:, 1]
            valid = (d[:, 2] != 0) & (t > t_min) & (x * x + y * y <= r * r)
            best = np.where(valid & (t < best), t, best)
    p = o + np.where(np.isfinite(best), best, 0.0)[:, None] * d
    n = np.zeros_like(o)
    on_cap = np.abs(np.abs(p[:, 2]) - h) < 1e-9 * max(1.0, h)
    n[on_cap, 2] = np.sign(p[on_cap, 2])
    side = ~on_cap
    n[side, :2] = p[side, :2]
    return best, n


_HITTERS = {"sphere": _hit_sphere, "box": _hit_box, "cylinder": _hit_cylinder}


def cast_rays(placements: list[Placement], origins, dirs, t_min: float = 1e-9):
    """Nearest hit of each ray. Returns (t, placement index or -1, unit world normal)."""
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    t_best = np.full(len(origins), np.inf)
    idx = np.full(len(origins), -1, dtype=np.int64)
    normal = np.zeros_like(origins)
    for k, pl in enumerate(placements):
        inv = pl.pose.inverse()
        o_l = inv.apply(origins)
        d_l = inv.apply_direction(dirs)
        t, n_l = _HITTERS[pl.primitive.shape](o_l, d_l, pl.primitive.half_extents, t_min)
        closer = t < t_best
        if not closer.any():
            continue
        t_best = np.where(closer, t, t_best)
        idx[closer] = k
        n_w = pl.pose.apply_direction(n_l[closer])
        nrm = np.linalg.norm(n_w, axis=1, keepdims=True)
        normal[closer] = n_w / np.where(nrm > 0, nrm, 1.0)
    return t_best, idx, normal


def render_reference(scene: SceneSpec, camera: Camera, light_dir=None, ambient: float = 0.3):
    """Flat-albedo (or single directional light Lambertian) render plus ray-distance depth."""
    o, d = camera.pixel_rays()
    placements = scene.placements
    t, idx, n = cast_rays(placements, o, d)
    t = np.where((t >= camera.near) & (t <= camera.far), t, np.inf)
    img = np.broadcast_to(BACKGROUND_COLOR, o.shape).copy()
    hit = np.isfinite(t)
    if hit.any():
        albedo = np.stack([p.primitive.albedo for p in placements])[idx[hit]]
        if light_dir is not None:
            l = -np.asarray(light_dir, dtype=np.float64)
            l /= np.linalg.norm(l)
            nn = n[hit] * np.sign(-np.einsum("ij,ij->i", n[hit], d[hit]))[:, None]
            shade = ambient + (1 - ambient) * np.clip(nn @ l, 0.0, None)
            albedo = albedo * shade[:, None]
        img[hit] = albedo
    shape = (camera.height, camera.width)
    return img.reshape(*shape, 3), t.reshape(shape)


def signed_distance(placements: list[Placement], points) -> np.ndarray:
    """Exact signed distance to the union of primitives (negative inside)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    best = np.full(len(pts), np.inf)
    for pl in placements:
        p = pl.pose.inverse().apply(pts)
        he = pl.primitive.half_extents
        if pl.primitive.shape == "sphere":
            sd = np.linalg.norm(p, axis=1) - he[0]
        elif pl.primitive.shape == "box":
            q = np.abs(p) - he
            sd = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
        else:
            q = np.stack([np.hypot(p[:, 0], p[:, 1]) - he[0], np.abs(p[:, 2]) - he[2]], 1)
            sd = np.linalg.norm(np.maximum(q, 0), axis=1) + np.minimum(q.max(axis=1), 0)
        best = np.minimum(best, sd)
    return best


def analytic_visibility(placements: list[Placement], cameras: list[Camera], points,
                        chunk: int = 200_000) -> np.ndarray:
    """Fraction of cameras that see each point unoccluded, from exact ray casts."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    count = np.zeros(len(pts))
    for cam in cameras:
        o = cam.center
        for s in range(0, len(pts), chunk):
            p = pts[s:s + chunk]
            u, v, z = cam.project(p)
            inside = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
            diff = p - o
            dist = np.linalg.norm(diff, axis=1)
            dirs = diff / np.where(dist > 0, dist, 1.0)[:, None]
            t, _, _ = cast_rays(placements, np.broadcast_to(o, p.shape), dirs)
            count[s:s + chunk] += inside & (dist < t)
    return count / len(cameras)


# ---------------------------------------------------------------------------
# cameras

def sample_hemisphere_cameras(count: int, radius: float, look_at_point=(0.0, 0.0, 0.0), seed: int = 0,
                              width: int = 64, height: int = 64, fov_deg: float = 40.0,
                              min_elevation_deg: float = 0.0, near: float = 0.05,
                              far: float | None = None) -> list[Camera]:
    """Cameras uniformly distributed (by area) on the upper hemisphere, aimed at its center."""
    if count < 1 or radius <= 0:
        raise ValueError("need count >= 1 and radius > 0")
    rng = np.random.default_rng(seed)
    center = np.asarray(look_at_point, dtype=np.float64)
    z_lo = np.sin(np.radians(min_elevation_deg))
    zs = rng.uniform(z_lo, 1.0, size=count)
    phis = rng.uniform(0.0, 2 * np.pi, size=count)
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    far = 3.0 * radius if far is None else far
    cams = []
    for z, phi in zip(zs, phis):
        rxy = np.sqrt(max(0.0, 1.0 - z * z))
        eye = center + radius * np.array([rxy * np.cos(phi), rxy * np.sin(phi), z])
        cams.append(Camera(f, f, width / 2.0, height / 2.0, width, height,
                           look_at(eye, center), near, far))
    return cams


def sphere_view_cameras(center, radius: float, width: int, height: int, fov_deg: float) -> list[Camera]:
    """Eight views from the cube-corner directions: four from above, four from below."""
    center = np.asarray(center, dtype=np.float64)
    cams = []
    for sx in (-1, 1):
        for sy in (-1, 1):
            for sz in (1, -1):
                d = np.array([sx, sy * 0.8, sz * 1.1])
                eye = center + radius * d / np.linalg.norm(d)
                f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
                cams.append(Camera(f, f, width / 2.0, height / 2.0, width, height,
                                   look_at(eye, center), 0.01 * radius, 4.0 * radius))
    return cams


# ---------------------------------------------------------------------------
# scene sets

@dataclass
class SceneSetConfig:
    num_objects: int = 2
    num_scenes: int = 3
    seed: int = 0
    width: int = 64
    height: int = 64
    num_cameras: int = 100
    num_holdout: int = 10
    camera_radius: float = 2.2
    fov_deg: float = 40.0
    min_elevation_deg: float = 8.0
    table_half_extents: tuple = (0.64, 0.48, 0.04)
    table_albedo: tuple = (0.78, 0.66, 0.52)
    object_shapes: tuple = ("box", "cylinder")
    object_size: tuple = (0.1, 0.16)
    perturb_frames: bool = True
    light_dir: tuple | None = None
    placement_attempts: int = 500
    exposure_samples: int = 300


PALETTE = np.array([
    [0.20, 0.45, 0.75], [0.80, 0.25, 0.25], [0.25, 0.62, 0.35], [0.60, 0.35, 0.70],
    [0.85, 0.55, 0.15], [0.20, 0.60, 0.65],
])


@dataclass(eq=False)
class SceneSet:
    scenes: list[SceneSpec]
    frame_perturbations: list[PoseSim3]  # world -> scene frame
    rng_seed: int
    world_aabb: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))

    def __post_init__(self):
        if len(self.scenes) < 1 or len(self.scenes) != len(self.frame_perturbations):
            raise ValueError("need one perturbation per scene and N >= 1")
        p0 = self.frame_perturbations[0]
        if not (np.allclose(p0.matrix(), np.eye(4))):
            raise ValueError("scene 1 perturbation must be identity")
        for p in self.frame_perturbations:
            if not 0.5 <= p.scale <= 2.0:
                raise ValueError("perturbation scale must lie in [0.5, 2]")


@dataclass(eq=False)
class SceneSetData:
    """A generated scene set with rendered training views and evaluation references."""

    scene_set: SceneSet
    config: SceneSetConfig
    cameras: list[list[Camera]]          # per scene, in scene frame
    holdout_cameras: list[list[Camera]]  # per scene, in scene frame
    images: list[np.ndarray]             # per scene, (L, H, W, 3) float in [0, 1]
    clean_images: list[np.ndarray]       # per scene, (Lh, H, W, 3)
    aabbs: list[np.ndarray]              # per scene, (2, 3) in scene frame
    world_cameras: list[Camera] = field(default_factory=list)
    world_holdout: list[Camera] = field(default_factory=list)


def make_table(cfg: SceneSetConfig) -> Placement:
    he = np.asarray(cfg.table_half_extents, dtype=np.float64)
    return Placement(0, Primitive("box", he, cfg.table_albedo), PoseSE3(np.eye(3), [0, 0, -he[2]]))


def resting_options(prim: Primitive) -> list[np.ndarray]:
    """Rotations (local -> world, before yaw) putting each distinct face/side onto the table."""
    if prim.shape == "box":
        opts = []
        for axis in range(3):
            for sign in (-1.0, 1.0):
                n = np.zeros(3)
                n[axis] = sign
                opts.append(_rotation_between(n, np.array([0.0, 0.0, -1.0])))
        return opts
    if prim.shape == "cylinder":
        return [np.eye(3), rotation_from_axis_angle([1, 0, 0], np.pi),
                rotation_from_axis_angle([1, 0, 0], np.pi / 2)]
    return [np.eye(3)]


def _rotation_between(a, b) -> np.ndarray:
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    v = np.cross(a, b)
    c = float(a @ b)
    if np.linalg.norm(v) < 1e-12:
        if c > 0:
            return np.eye(3)
        perp = np.array([1.0, 0, 0]) if abs(a[0]) < 0.9 else np.array([0, 1.0, 0])
        return rotation_from_axis_angle(np.cross(a, perp), np.pi)
    return rotation_from_axis_angle(v, np.arctan2(np.linalg.norm(v), c))


def _rest_height(prim: Primitive, rot: np.ndarray) -> float:
    """Height of the local origin above the support plane for rotation `rot`."""
    he = prim.half_extents
    if prim.shape == "sphere":
        return he[0]
    if prim.shape == "box":
        return float(np.abs(rot[2]) @ he)
    axis_z = rot[2, 2]
    return float(he[2] * abs(axis_z) + he[0] * np.sqrt(max(0.0, 1 - axis_z ** 2)))


def make_objects(cfg: SceneSetConfig, rng: np.random.Generator) -> list[Primitive]:
    prims = []
    lo, hi = cfg.object_size
    for j in range(cfg.num_objects):
        shape = cfg.object_shapes[j % len(cfg.object_shapes)]
        if shape == "box":
            he = np.sort(rng.uniform(lo, hi, size=3))
            he = he + np.array([0.0, 0.15, 0.3]) * (hi - lo)  # keep the three extents distinct
        elif shape == "cylinder":
            r = rng.uniform(lo, hi) * 0.8
            he = np.array([r, r, rng.uniform(lo, hi) * 1.1])
        else:
            r = rng.uniform(lo, hi)
            he = np.array([r, r, r])
        prims.append(Primitive(shape, he, PALETTE[j % len(PALETTE)]))
    return prims


def _surface_samples(prim: Primitive, count: int, rng: np.random.Generator):
    """Area-uniform samples (points, outward normals) on a primitive in its local frame."""
    he = prim.half_extents
    if prim.shape == "sphere":
        n = rng.normal(size=(count, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        return n * he[0], n
    if prim.shape == "box":
        areas = np.array([he[1] * he[2], he[1] * he[2], he[0] * he[2], he[0] * he[2],
                          he[0] * he[1], he[0] * he[1]])
        face = rng.choice(6, size=count, p=areas / areas.sum())
        p = rng.uniform(-1, 1, size=(count, 3)) * he
        n = np.zeros((count, 3))
        axis = face // 2
        sign = np.where(face % 2 == 0, -1.0, 1.0)
        p[np.arange(count), axis] = sign * he[axis]
        n[np.arange(count), axis] = sign
        return p, n
    r, h = he[0], he[2]
    areas = np.array([np.pi * r * r, np.pi * r * r, 2 * np.pi * r * 2 * h])
    part = rng.choice(3, size=count, p=areas / areas.sum())
    p = np.zeros((count, 3))
    n = np.zeros((count, 3))
    phi = rng.uniform(0, 2 * np.pi, size=count)
    rad = r * np.sqrt(rng.uniform(0, 1, size=count))
    for k, zc in ((0, -h), (1, h)):
        m = part == k
        p[m] = np.stack([rad[m] * np.cos(phi[m]), rad[m] * np.sin(phi[m]), np.full(m.sum(), zc)], 1)
        n[m, 2] = np.sign(zc)
    m = part == 2
    p[m] = np.stack([r * np.cos(phi[m]), r * np.sin(phi[m]), rng.uniform(-h, h, size=m.sum())], 1)
    n[m, 0], n[m, 1] = np.cos(phi[m]), np.sin(phi[m])
    return p, n


def primitive_surface_samples(prim: Primitive, count: int, seed: int = 0):
    return _surface_samples(prim, count, np.random.default_rng(seed))


def exposure_check(scenes: list[SceneSpec], cameras: list[Camera], samples: int, seed: int = 0) -> bool:
    """True iff every sampled surface point of every object is seen unoccluded in some scene."""
    rng = np.random.default_rng(seed)
    m = len(scenes[0].objects)
    for j in range(1, m + 1):
        prim = scenes[0].objects[j - 1].primitive
        p_loc, n_loc = _surface_samples(prim, samples, rng)
        seen = np.zeros(samples, dtype=bool)
        for scene in scenes:
            pl = scene.objects[j - 1]
            pw = pl.pose.apply(p_loc)
            nw = pl.pose.apply_direction(n_loc)
            scale = max(1.0, float(np.abs(pw).max()))
            for cam in cameras:
                todo = ~seen
                if not todo.any():
                    break
                p = pw[todo]
                u, v, z = cam.project(p)
                diff = p - cam.center
                dist = np.linalg.norm(diff, axis=1)
                front = np.einsum("ij,ij->i", nw[todo], -diff) > 0
                inside = (z > 0) & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height) & front
                if not inside.any():
                    continue
                t, _, _ = cast_rays(scene.placements, np.broadcast_to(cam.center, p.shape), diff / dist[:, None])
                ok = inside & (t >= dist - 1e-7 * scale)
                idx = np.flatnonzero(todo)
                seen[idx[ok]] = True
        if not seen.all():
            return False
    return True


def _arrange_scene(cfg, prims, rest_choice, rng, table_he):
    placed = []
    for j, prim in enumerate(prims):
        opts = resting_options(prim)
        k = rest_choice[j] % len(opts)
        rest = opts[k]
        if prim.shape == "cylinder" and k == 2:
            rest = rest @ rotation_from_axis_angle([0, 0, 1], rng.uniform(0, 2 * np.pi))
        rot = rotation_from_axis_angle([0, 0, 1], rng.uniform(0, 2 * np.pi)) @ rest
        foot = float(np.linalg.norm(prim.half_extents[:2] if prim.shape == "cylinder" and k < 2
                                    else prim.half_extents))
        gap = 0.12 * max(table_he[0], table_he[1])
        for _ in range(cfg.placement_attempts):
            xy = rng.uniform(-1, 1, size=2) * (table_he[:2] - foot - 0.03)
            if all(np.linalg.norm(xy - c[:2]) >= foot + f + gap for c, f, _ in placed):
                break
        else:
            return None
        center = np.array([xy[0], xy[1], _rest_height(prim, rot)])
        placed.append((center, foot, Placement(j + 1, prim, PoseSE3(rot, center))))
    return [p for _, _, p in placed]


def random_perturbation(rng: np.random.Generator, extent: float) -> PoseSim3:
    """Gravity-aligned similarity: log-uniform scale in [0.5, 2], random yaw, random offset."""
    s = float(np.exp(rng.uniform(np.log(0.5), np.log(2.0))))
    yaw = rotation_from_axis_angle([0, 0, 1], rng.uniform(0, 2 * np.pi))
    t = rng.uniform(-1, 1, size=3) * extent
    return PoseSim3(yaw, t, s)


def world_aabb(cfg: SceneSetConfig, scenes: list[SceneSpec]) -> np.ndarray:
    he = np.asarray(cfg.table_half_extents)
    top = 0.0
    for sc in scenes:
        for o in sc.objects:
            corners = _local_corners(o.primitive.half_extents)
            top = max(top, float(o.pose.apply(corners)[:, 2].max()))
    margin = 0.06 * max(he[0], he[1])
    return np.array([[-he[0] - margin, -he[1] - margin, -2 * he[2] - margin],
                     [he[0] + margin, he[1] + margin, top + margin]])


def _local_corners(he) -> np.ndarray:
    s = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)], dtype=np.float64)
    return s * np.asarray(he)


def transformed_aabb(aabb: np.ndarray, pose: PoseSim3) -> np.ndarray:
    c = pose.apply(_local_corners((aabb[1] - aabb[0]) / 2) + (aabb[0] + aabb[1]) / 2)
    return np.stack([c.min(axis=0), c.max(axis=0)])


def generate_scene_set(cfg: SceneSetConfig) -> SceneSetData:
    """Build N arrangements of the same M objects, render training views and clean references."""
    if cfg.num_scenes < 1 or cfg.num_objects < 0:
        raise ValueError("need N >= 1 and M >= 0")
    rng = np.random.default_rng(cfg.seed)
    table = make_table(cfg)
    table_he = np.asarray(cfg.table_half_extents, dtype=np.float64)
    prims = make_objects(cfg, rng)
    world_cams = sample_hemisphere_cameras(
        cfg.num_cameras, cfg.camera_radius, (0, 0, 0), cfg.seed, cfg.width, cfg.height,
        cfg.fov_deg, cfg.min_elevation_deg)
    holdout = sample_hemisphere_cameras(
        cfg.num_holdout, cfg.camera_radius, (0, 0, 0), cfg.seed + 7919, cfg.width, cfg.height,
        cfg.fov_deg, cfg.min_elevation_deg)

    scenes = None
    for _ in range(cfg.placement_attempts):
        # cycle each object's resting face across scenes, starting from a random face
        rest = [rng.permutation(len(resting_options(p))) for p in prims]
        scenes = []
        for i in range(cfg.num_scenes):
            choice = [r[i % len(r)] for r in rest]
            objs = _arrange_scene(cfg, prims, choice, rng, table_he)
            if objs is None:
                scenes = None
                break
            scenes.append(SceneSpec(i + 1, [table], objs))
        if scenes is None:
            continue
        # a single arrangement always hides each resting face, so exposure is only demanded for N >= 2
        if cfg.num_objects == 0 or cfg.num_scenes == 1 or exposure_check(scenes, world_cams, cfg.exposure_samples, cfg.seed):
            break
        scenes = None
    if scenes is None:
        raise ValueError("could not place objects without overlap while exposing every surface")

    extent = float(np.linalg.norm(table_he))
    perts = [PoseSim3.identity()]
    for _ in range(1, cfg.num_scenes):
        perts.append(random_perturbation(rng, extent) if cfg.perturb_frames else PoseSim3.identity())
    box = world_aabb(cfg, scenes)
    sset = SceneSet(scenes, perts, cfg.seed, box)

    images, clean, cams, hold, aabbs = [], [], [], [], []
    bg_only = scenes[0].without_objects()
    clean_world = np.stack([render_reference(bg_only, c, cfg.light_dir)[0] for c in holdout])
    for scene, pert in zip(scenes, perts):
        images.append(np.stack([render_reference(scene, c, cfg.light_dir)[0] for c in world_cams]))
        clean.append(clean_world.copy())
        cams.append([c.transformed(pert) for c in world_cams])
        hold.append([c.transformed(pert) for c in holdout])
        aabbs.append(transformed_aabb(box, pert))
    return SceneSetData(sset, cfg, cams, hold, images, clean, aabbs, world_cams, holdout)


# ---------------------------------------------------------------------------
# dataset files

def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(path, img: np.ndarray) -> None:
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG", optimize=False)


def load_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def _dump(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def write_dataset(data: SceneSetData, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i in range(len(data.images)):
        sdir = root / f"scene_{i + 1}"
        for sub in ("images", "clean_gt"):
            (sdir / sub).mkdir(parents=True, exist_ok=True)
        for l, img in enumerate(data.images[i]):
            save_png(sdir / "images" / f"{l:03d}.png", img)
        for l, img in enumerate(data.clean_images[i]):
            save_png(sdir / "clean_gt" / f"{l:03d}.png", img)
        _dump({"aabb": data.aabbs[i].tolist(),
               "frames": [c.to_dict() for c in data.cameras[i]],
               "holdout": [c.to_dict() for c in data.holdout_cameras[i]]},
              sdir / "cameras.json")
    sset = data.scene_set
    _dump({"seed": sset.rng_seed,
           "world_aabb": sset.world_aabb.tolist(),
           "perturbations": [p.to_dict() for p in sset.frame_perturbations],
           "scenes": [s.to_dict() for s in sset.scenes],
           "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(data.config).items()}},
          root / "truth.json")


def load_scene_views(root, scene_index: int):
    """(images (L,H,W,3), cameras, holdout cameras, aabb) of 1-based scene `scene_index`."""
    sdir = Path(root) / f"scene_{scene_index}"
    with open(sdir / "cameras.json") as fh:
        meta = json.load(fh)
    cams = [Camera.from_dict(c) for c in meta["frames"]]
    hold = [Camera.from_dict(c) for c in meta["holdout"]]
    files = sorted(os.listdir(sdir / "images"))
    images = np.stack([load_png(sdir / "images" / f) for f in files])
    return images, cams, hold, np.asarray(meta["aabb"], dtype=np.float64)


def load_clean_references(root, scene_index: int) -> np.ndarray:
    sdir = Path(root) / f"scene_{scene_index}" / "clean_gt"
    return np.stack([load_png(sdir / f) for f in sorted(os.listdir(sdir))])


def load_truth(root) -> dict:
    with open(Path(root) / "truth.json") as fh:
        t = json.load(fh)
    t["perturbations"] = [PoseSim3.from_dict(p) for p in t["perturbations"]]
    t["scenes"] = [SceneSpec.from_dict(s) for s in t["scenes"]]
    t["world_aabb"] = np.asarray(t["world_aabb"])
    return t


def count_scenes(root) -> int:
    return len([d for d in os.listdir(root) if d.startswith("scene_")])
