"""Resumable end-to-end pipeline: synthesize, train, visibility, align, fuse, segment, match, evaluate."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fusion as fz
from .camera import Camera
from .field import TrainConfig, TrainHistory, load_field, optimize_field, render_image, save_field, \
    VoxelRadianceField
from .geometry import PointCloud, marching_cubes, read_ply, sample_surface, voxel_downsample, write_ply
from .metrics import evaluate, psnr
from .poses import PoseSE3, PoseSim3, pose_error
from .registration import MATCH_THRESHOLD, MatchResult, match_objects, register_scene, solve_sim3_correspondences
from .scenegen import SceneSetConfig, count_scenes, generate_scene_set, load_clean_references, load_png, \
    load_scene_views, load_truth, render_reference, save_png, sphere_view_cameras, write_dataset
from .segmentation import SegmentConfig, segment_scene
from .visibility import compute_visibility_field, load_visibility, save_visibility, smooth

log = logging.getLogger(__name__)

STAGES = ("synth", "train", "visibility", "align", "fuse-bg", "segment", "match", "fuse-obj", "eval")
DEPENDS = {
    "synth": (),
    "train": ("synth",),
    "visibility": ("train",),
    "align": ("train",),
    "fuse-bg": ("visibility", "align"),
    "segment": ("align", "fuse-bg"),
    "match": ("segment",),
    "fuse-obj": ("match", "segment", "fuse-bg"),
    "eval": ("fuse-bg", "fuse-obj"),
}
N1_NOTICE = "fusion requires N≥2 for occlusion removal"


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    workspace: str = "workspace"
    seed: int = 0
    dataset: str | None = None           # existing dataset; default: synthesize into <workspace>/data
    synth: SceneSetConfig = field(default_factory=SceneSetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    vis_res: int = 64
    smooth_iters: int = 4
    p: float = fz.DEFAULT_P
    iso_thickness: float = 0.3
    surface_samples: int = 300_000
    registration_leaf: float = 1 / 64    # fraction of the scene extent
    segmentation_leaf: float = 1 / 200
    diff_floor_voxels: float = 3.0
    min_cluster_points: int = 10
    min_object_points: int = 100
    match_threshold: float = MATCH_THRESHOLD
    object_margin_voxels: float = 2.0
    object_view_size: int = 64
    object_view_fov: float = 40.0

    def __post_init__(self):
        if isinstance(self.synth, dict):
            self.synth = SceneSetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.synth.items()})
        if isinstance(self.train, dict):
            self.train = TrainConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.train.items()})
        if self.dataset is not None and Path(self.dataset).resolve() == Path(self.workspace).resolve():
            raise ValueError("dataset and workspace paths must differ")
        if self.vis_res < 2 or self.smooth_iters < 0 or self.p < 1:
            raise ValueError("invalid visibility or fusion parameters")

    @classmethod
    def from_json(cls, path, **overrides) -> "PipelineConfig":
        with open(path) as fh:
            raw = json.load(fh)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self), default=list))

    def params(self, stage: str) -> dict:
        """The configuration slice a stage's output depends on."""
        d = self.to_dict()
        pick = {
            "synth": ["seed", "dataset", "synth"],
            "train": ["seed", "train"],
            "visibility": ["vis_res", "smooth_iters"],
            "align": ["iso_thickness", "surface_samples", "registration_leaf", "segmentation_leaf", "seed"],
            "fuse-bg": ["p", "iso_thickness", "surface_samples", "segmentation_leaf", "seed"],
            "segment": ["diff_floor_voxels", "min_cluster_points", "min_object_points", "segmentation_leaf"],
            "match": ["match_threshold", "seed"],
            "fuse-obj": ["p", "object_margin_voxels", "object_view_size", "object_view_fov"],
            "eval": [],
        }[stage]
        return {k: d[k] for k in pick}


@dataclass
class StageRecord:
    name: str
    status: str          # "ran" | "skipped" | "failed"
    seconds: float
    info: dict


@dataclass
class PipelineReport:
    stages: list[StageRecord] = field(default_factory=list)
    notices: list[str] = field(default_factory=list)

    def info(self, name: str) -> dict:
        for s in self.stages:
            if s.name == name:
                return s.info
        return {}

    def to_dict(self) -> dict:
        out = {"stages": [dataclasses.asdict(s) for s in self.stages], "notices": list(self.notices)}
        align = self.info("align")
        match = self.info("match")
        ev = self.info("eval")
        out["registration"] = {"scenes": align.get("scenes", []), "objects": match.get("scenes", {})}
        out["metrics"] = ev
        return out


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _json_dump(obj, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _json_load(path):
    with open(path) as fh:
        return json.load(fh)


class Workspace:
    def __init__(self, config: PipelineConfig):
        self.config = config
        self.root = Path(config.workspace)
        self.root.mkdir(parents=True, exist_ok=True)
        self.data = Path(config.dataset) if config.dataset else self.root / "data"
        self.manifest_path = self.root / "manifest.json"
        self.manifest = _json_load(self.manifest_path) if self.manifest_path.exists() else {}

    def path(self, *parts) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def rel(self, p: Path) -> str:
        p = Path(p)
        try:
            return str(p.resolve().relative_to(self.root.resolve()))
        except ValueError:
            return str(p.resolve())

    def abs(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def num_scenes(self) -> int:
        return count_scenes(self.data)

    def has_truth(self) -> bool:
        return (self.data / "truth.json").exists()

    def save_manifest(self) -> None:
        _json_dump(self.manifest, self.manifest_path)

    def input_hash(self, stage: str) -> str:
        h = hashlib.sha256()
        h.update(stage.encode())
        h.update(json.dumps(self.config.params(stage), sort_keys=True).encode())
        for dep in DEPENDS[stage]:
            entry = self.manifest.get(dep)
            if entry is None:
                raise StageError(stage, f"upstream stage '{dep}' has not run")
            h.update(json.dumps(entry["outputs"], sort_keys=True).encode())
        return h.hexdigest()

    def up_to_date(self, stage: str) -> bool:
        entry = self.manifest.get(stage)
        if entry is None:
            return False
        try:
            if entry["input"] != self.input_hash(stage):
                return False
        except StageError:
            return False
        for rel, digest in entry["outputs"].items():
            p = self.abs(rel)
            if not p.exists() or sha256_file(p) != digest:
                return False
        return True


# ---------------------------------------------------------------------------
# artifact helpers

def field_path(ws, i):
    return ws.path("fields", f"scene_{i}.vxrf")


def vis_path(ws, i, raw=False):
    return ws.path("visibility", f"scene_{i}{'_raw' if raw else ''}.vis")


def cloud_path(ws, i, kind):
    return ws.path("clouds", f"scene_{i}_{kind}.ply")


def load_poses(ws) -> list[PoseSim3]:
    meta = _json_load(ws.path("align", "poses.json"))
    return [PoseSim3.from_dict(s["to_reference"]) for s in meta["scenes"]]


def build_context(ws, p: float | None = None, smoothed: bool = True, objects: bool = True) -> fz.FusionContext:
    n = ws.num_scenes()
    poses = load_poses(ws)
    scenes = [fz.AlignedScene(load_field(field_path(ws, i)), load_visibility(vis_path(ws, i, raw=not smoothed)),
                              poses[i - 1]) for i in range(1, n + 1)]
    ctx = fz.FusionContext(scenes, ws.config.p if p is None else p)
    obj_file = ws.root / "fusion" / "objects.json"
    if objects and obj_file.exists():
        meta = _json_load(obj_file)
        for key, o in meta["objects"].items():
            j = int(key)
            ctx.object_poses[j] = [None if q is None else PoseSE3.from_dict(q) for q in o["poses"]]
            ctx.object_bounds[j] = np.asarray(o["bounds"], dtype=np.float64)
        ctx.exclusion = fz.ExclusionZone(read_ply(ws.path("clouds", "background.ply")), meta["exclusion_radius"])
    return ctx


def surface_cloud(fld: VoxelRadianceField, thickness: float, count: int, seed: int) -> PointCloud:
    mesh = marching_cubes(fld, thickness / fld.voxel_size)
    if mesh.is_empty:
        raise ValueError("no surface found at the configured iso level")
    return sample_surface(mesh, count, seed)


def _extent(aabb) -> float:
    aabb = np.asarray(aabb)
    return float(np.max(aabb[1] - aabb[0]))


# ---------------------------------------------------------------------------
# stages: each returns (output paths, info)

def stage_synth(ws: Workspace):
    cfg = ws.config
    if cfg.dataset is None:
        synth = dataclasses.replace(cfg.synth, seed=cfg.seed)
        data = generate_scene_set(synth)
        write_dataset(data, ws.data)
    if not ws.data.exists() or ws.num_scenes() < 1:
        raise ValueError(f"no scenes found under {ws.data}")
    outputs = sorted(p for p in ws.data.rglob("*") if p.is_file())
    return outputs, {"scenes": ws.num_scenes()}


def stage_train(ws: Workspace):
    cfg = ws.config
    outputs, info = [], {"scenes": []}
    for i in range(1, ws.num_scenes() + 1):
        images, cams, _, aabb = load_scene_views(ws.data, i)
        hist = TrainHistory()
        fld = optimize_field(images, cams, aabb, dataclasses.replace(cfg.train, seed=cfg.seed * 1000 + i), hist)
        save_field(fld, field_path(ws, i))
        outputs.append(field_path(ws, i))
        st = fld.default_settings()
        views = range(0, len(cams), max(1, len(cams) // 10))
        scores = [psnr(render_image(fld, cams[k], st)[0], images[k]) for k in views]
        info["scenes"].append({"scene": i, "seconds": hist.seconds, "final_loss": hist.losses[-1],
                               "resolution": list(fld.resolution), "train_psnr": float(np.mean(scores)),
                               "train_psnr_min": float(np.min(scores))})
    return outputs, info


def stage_visibility(ws: Workspace):
    cfg = ws.config
    outputs, info = [], {"scenes": []}
    for i in range(1, ws.num_scenes() + 1):
        _, cams, _, aabb = _scene_meta(ws, i)
        fld = load_field(field_path(ws, i))
        t = time.perf_counter()
        raw = compute_visibility_field(fld, cams, aabb, cfg.vis_res)
        save_visibility(raw, vis_path(ws, i, raw=True))
        save_visibility(smooth(raw, cfg.smooth_iters), vis_path(ws, i))
        outputs += [vis_path(ws, i, raw=True), vis_path(ws, i)]
        info["scenes"].append({"scene": i, "seconds": time.perf_counter() - t,
                               "mean_visibility": float(raw.values.mean())})
    return outputs, info


def _scene_meta(ws, i):
    with open(ws.data / f"scene_{i}" / "cameras.json") as fh:
        meta = json.load(fh)
    cams = [Camera.from_dict(c) for c in meta["frames"]]
    hold = [Camera.from_dict(c) for c in meta["holdout"]]
    return None, cams, hold, np.asarray(meta["aabb"], dtype=np.float64)


def stage_align(ws: Workspace):
    cfg = ws.config
    n = ws.num_scenes()
    _, ref_cams, _, ref_aabb = _scene_meta(ws, 1)
    ref_centers = np.array([c.center for c in ref_cams])
    extent = _extent(ref_aabb)
    coarse_leaf = cfg.registration_leaf * extent
    fine_leaf = cfg.segmentation_leaf * extent
    ref_coarse = None
    outputs, scenes = [], []
    for i in range(1, n + 1):
        fld = load_field(field_path(ws, i))
        native = surface_cloud(fld, cfg.iso_thickness, cfg.surface_samples, cfg.seed + i)
        _, cams, _, _ = _scene_meta(ws, i)
        if i == 1:
            pose = PoseSim3.identity()
            entry = {"scene": 1, "camera_fit_rmse": 0.0, "fitness": 1.0, "inlier_rmse": 0.0}
        else:
            centers = np.array([c.center for c in cams])
            if len(centers) != len(ref_centers):
                raise ValueError(f"scene {i} has {len(centers)} cameras, reference has {len(ref_centers)}")
            init = solve_sim3_correspondences(centers, ref_centers)
            cam_rmse = float(np.sqrt(np.mean(np.sum((init.apply(centers) - ref_centers) ** 2, axis=1))))
            coarse = voxel_downsample(native, coarse_leaf / init.scale)
            res = register_scene(coarse, ref_coarse, init, coarse_leaf)
            pose = res.pose
            entry = {"scene": i, "camera_fit_rmse": cam_rmse, "fitness": res.fitness, "inlier_rmse": res.inlier_rmse}
        fine = voxel_downsample(native.transformed(pose), fine_leaf)
        if i == 1:
            ref_coarse = voxel_downsample(native, coarse_leaf)
        entry["to_reference"] = pose.to_dict()
        if ws.has_truth():
            truth = load_truth(ws.data)["perturbations"][i - 1].inverse()
            ds, dr, dt = pose_error(pose, truth)
            entry["truth_error"] = {"scale": ds, "rotation_deg": float(np.degrees(dr)), "translation": dt}
        write_ply(cloud_path(ws, i, "reference"), fine)
        outputs.append(cloud_path(ws, i, "reference"))
        scenes.append(entry)
    _json_dump({"scenes": scenes, "coarse_leaf": coarse_leaf, "fine_leaf": fine_leaf}, ws.path("align", "poses.json"))
    outputs.append(ws.path("align", "poses.json"))
    return outputs, {"scenes": scenes}


def fused_grid(ctx: fz.FusionContext, target=fz.BACKGROUND, chunk: int = 200_000) -> VoxelRadianceField:
    """Sample the fused field on the reference scene's grid nodes."""
    ref = ctx.scenes[0].field
    nodes = ref.node_positions().reshape(-1, 3)
    sig = np.empty(len(nodes))
    col = np.empty((len(nodes), 3))
    for s in range(0, len(nodes), chunk):
        sig[s:s + chunk], col[s:s + chunk] = fz.fused_sample_points(ctx, nodes[s:s + chunk], target)
    return VoxelRadianceField(ref.aabb, sig.reshape(ref.resolution),
                              np.clip(col, 0, 1).reshape(ref.resolution + (3,)))


def stage_fuse_bg(ws: Workspace):
    cfg = ws.config
    ctx = build_context(ws)
    meta = _json_load(ws.path("align", "poses.json"))
    _, _, hold, _ = _scene_meta(ws, 1)
    outputs = []
    bg = fused_grid(ctx)
    save_field(bg, ws.path("fields", "background.vxrf"))
    outputs.append(ws.path("fields", "background.vxrf"))
    st = ctx.default_settings()
    for k, cam in enumerate(hold):
        img, _, _ = fz.render_fused(cam, ctx, fz.BACKGROUND, st)
        out = ws.path("renders", "background", f"{k:03d}.png")
        save_png(out, img)
        outputs.append(out)
    cloud = voxel_downsample(surface_cloud(bg, cfg.iso_thickness, cfg.surface_samples, cfg.seed),
                             meta["fine_leaf"])
    write_ply(ws.path("clouds", "background.ply"), cloud)
    labels = fz.export_scene_labels(cloud, ctx)
    write_ply(ws.path("labels", "background.ply"), labels)
    manifest = {"N": len(ctx.scenes), "p": ctx.p,
                "poses": [s.to_reference.to_dict() for s in ctx.scenes],
                "fields": {ws.rel(field_path(ws, i)): sha256_file(field_path(ws, i))
                           for i in range(1, len(ctx.scenes) + 1)}}
    _json_dump(manifest, ws.path("fusion", "manifest.json"))
    outputs += [ws.path("clouds", "background.ply"), ws.path("labels", "background.ply"),
                ws.path("fusion", "manifest.json")]
    counts = np.bincount(labels.labels, minlength=len(ctx.scenes) + 1)[1:]
    return outputs, {"views": len(hold), "label_counts": counts.tolist()}


def stage_segment(ws: Workspace):
    cfg = ws.config
    meta = _json_load(ws.path("align", "poses.json"))
    rmse = max(s["inlier_rmse"] for s in meta["scenes"])
    # iso-surfaces of separately trained fields disagree by a couple of voxels even when aligned
    voxel = load_field(field_path(ws, 1)).voxel_size
    threshold = max(2.0 * rmse, cfg.diff_floor_voxels * voxel)
    bg = read_ply(ws.path("clouds", "background.ply"))
    expected = _expected_objects(ws)
    outputs, scenes = [], []
    for i in range(1, ws.num_scenes() + 1):
        cloud = read_ply(cloud_path(ws, i, "reference"))
        res = segment_scene(cloud, bg, SegmentConfig(threshold, None, cfg.min_cluster_points,
                                                     cfg.min_object_points, expected))
        total = len(res.background_cloud) + sum(len(o) for o in res.object_clouds) + len(res.residual_cloud)
        if total != len(cloud):
            raise ValueError(f"scene {i}: segmentation lost points ({total} of {len(cloud)})")
        write_ply(ws.path("segments", f"scene_{i}.ply"), res.labeled_cloud(cloud))
        outputs.append(ws.path("segments", f"scene_{i}.ply"))
        for k, obj in enumerate(res.object_clouds, start=1):
            write_ply(ws.path("segments", f"scene_{i}_object_{k}.ply"), obj)
            outputs.append(ws.path("segments", f"scene_{i}_object_{k}.ply"))
        scenes.append({"scene": i, "objects": len(res.object_clouds), "background": len(res.background_cloud),
                       "residual": len(res.residual_cloud), "total": len(cloud), "partition_ok": True,
                       "count_mismatch": res.count_mismatch, "notes": res.notes})
    _json_dump({"threshold": threshold, "scenes": scenes}, ws.path("segments", "summary.json"))
    outputs.append(ws.path("segments", "summary.json"))
    return outputs, {"threshold": threshold, "scenes": scenes}


def _expected_objects(ws) -> int | None:
    if ws.config.dataset is None:
        return ws.config.synth.num_objects
    if ws.has_truth():
        return len(load_truth(ws.data)["scenes"][0].objects)
    return None


def _object_clouds(ws, i) -> list[PointCloud]:
    summary = _json_load(ws.path("segments", "summary.json"))
    k = summary["scenes"][i - 1]["objects"]
    return [read_ply(ws.path("segments", f"scene_{i}_object_{j}.ply")) for j in range(1, k + 1)]


def stage_match(ws: Workspace):
    cfg = ws.config
    summary = _json_load(ws.path("segments", "summary.json"))
    mism = [s for s in summary["scenes"] if s["count_mismatch"]]
    if mism:
        raise ValueError("; ".join(f"scene {s['scene']}: " + " ".join(s["notes"]) for s in mism))
    ref = _object_clouds(ws, 1)
    out = {}
    for i in range(2, ws.num_scenes() + 1):
        cand = _object_clouds(ws, i)
        res = match_objects(ref, cand, None, cfg.match_threshold) if ref else MatchResult([], [], np.zeros((0, 0)), [])
        out[str(i)] = res.to_dict()
    info = {"scenes": out, "objects": len(ref)}
    if ws.has_truth() and ref:
        info["truth"] = _match_truth(ws, out)
    _json_dump(out, ws.path("match", "objects.json"))
    return [ws.path("match", "objects.json")], info


def _object_truth_ids(ws, i, clouds, pose: PoseSim3) -> list[int]:
    """Ground-truth object id nearest to each cloud's centroid (clouds in the reference frame)."""
    truth = load_truth(ws.data)
    pert = truth["perturbations"][i - 1]
    ref_from_world = pose.compose(pert)
    centers = np.array([ref_from_world.apply(o.pose.translation) for o in truth["scenes"][i - 1].objects])
    ids = [o.object_id for o in truth["scenes"][i - 1].objects]
    return [ids[int(np.argmin(np.linalg.norm(centers - c.points.mean(axis=0), axis=1)))] for c in clouds]


def _match_truth(ws, out) -> dict:
    poses = load_poses(ws)
    ref_ids = _object_truth_ids(ws, 1, _object_clouds(ws, 1), poses[0])
    res = {}
    for key, m in out.items():
        i = int(key)
        ids = _object_truth_ids(ws, i, _object_clouds(ws, i), poses[i - 1])
        res[key] = all(ids[k] == ref_ids[j] for j, k in enumerate(m["assignment"]))
    return res


def stage_fuse_obj(ws: Workspace):
    cfg = ws.config
    n = ws.num_scenes()
    matches = {int(k): MatchResult.from_dict(v) for k, v in _json_load(ws.path("match", "objects.json")).items()}
    ctx = build_context(ws, objects=False)
    ref = _object_clouds(ws, 1)
    voxel = ctx.scenes[0].field.voxel_size
    margin = cfg.object_margin_voxels * voxel
    radius = _json_load(ws.path("segments", "summary.json"))["threshold"]
    ctx.exclusion = fz.ExclusionZone(read_ply(ws.path("clouds", "background.ply")), radius)
    objects, outputs = {}, []
    for j in range(len(ref)):
        poses, clouds = [PoseSE3.identity()], [ref[j]]
        for i in range(2, n + 1):
            m = matches[i]
            k = m.assignment[j]
            if m.accepted[j]:
                poses.append(m.poses[j])
                clouds.append(_object_clouds(ws, i)[k])
            else:
                poses.append(None)
                clouds.append(None)
        bounds = fz.object_bounds_from_clouds(clouds, poses, margin)
        objects[str(j + 1)] = {"poses": [None if p is None else p.to_dict() for p in poses],
                               "bounds": bounds.tolist()}
        ctx.object_poses[j + 1] = poses
        ctx.object_bounds[j + 1] = bounds
    _json_dump({"objects": objects, "p": ctx.p, "exclusion_radius": radius}, ws.path("fusion", "objects.json"))
    outputs.append(ws.path("fusion", "objects.json"))
    st = ctx.default_settings()
    info = {"objects": {}}
    for j in range(1, len(ref) + 1):
        cams = object_view_cameras(ctx.object_bounds[j], margin, cfg.object_view_size, cfg.object_view_fov)
        _json_dump({"frames": [c.to_dict() for c in cams]}, ws.path("renders", f"object_{j}", "cameras.json"))
        outputs.append(ws.path("renders", f"object_{j}", "cameras.json"))
        for k, cam in enumerate(cams):
            img, _, _ = fz.render_fused(cam, ctx, j, st)
            save_png(ws.path("renders", f"object_{j}", f"{k:03d}.png"), img)
            outputs.append(ws.path("renders", f"object_{j}", f"{k:03d}.png"))
        labels = fz.export_scene_labels(ref[j - 1], ctx, j)
        write_ply(ws.path("labels", f"object_{j}.ply"), labels)
        outputs.append(ws.path("labels", f"object_{j}.ply"))
        used = [i + 1 for i, p in enumerate(ctx.object_poses[j]) if p is not None]
        info["objects"][str(j)] = {"scenes_used": used,
                                   "label_counts": np.bincount(labels.labels, minlength=n + 1)[1:].tolist()}
    return outputs, info


def object_view_cameras(bounds, margin, size, fov) -> list[Camera]:
    """Eight views around the (un-dilated) object box, from above and below."""
    center = 0.5 * (bounds[0] + bounds[1])
    half = 0.5 * np.linalg.norm(bounds[1] - bounds[0]) - margin
    dist = 1.15 * half / np.sin(np.radians(fov) / 2)
    return sphere_view_cameras(center, dist, size, size, fov)


def stage_eval(ws: Workspace):
    if not ws.has_truth():
        return [], {"skipped": "no ground truth available"}
    truth = load_truth(ws.data)
    out = {}
    renders_dir = ws.root / "renders" / "background"
    refs = load_clean_references(ws.data, 1)
    renders = [load_png(renders_dir / f"{k:03d}.png") for k in range(len(refs))]
    out["background"] = evaluate(renders, refs)
    obj_file = ws.root / "fusion" / "objects.json"
    if obj_file.exists():
        poses = load_poses(ws)
        ref = _object_clouds(ws, 1)
        ids = _object_truth_ids(ws, 1, ref, poses[0])
        scene1 = truth["scenes"][0]
        pert = truth["perturbations"][0]
        out["objects"] = {}
        for j, gid in enumerate(ids, start=1):
            meta = _json_load(ws.path("renders", f"object_{j}", "cameras.json"))
            cams = [Camera.from_dict(c) for c in meta["frames"]]
            world = pert.inverse()      # reference frame -> world
            gts = [render_reference(scene1.only_object(gid), c.transformed(world))[0] for c in cams]
            imgs = [load_png(ws.path("renders", f"object_{j}", f"{k:03d}.png")) for k in range(len(cams))]
            res = evaluate(imgs, gts)
            res["truth_id"] = gid
            out["objects"][str(j)] = res
    train = ws.manifest.get("train", {}).get("info", {})
    if train:
        out["train_psnr"] = [s["train_psnr"] for s in train.get("scenes", [])]
    _json_dump(out, ws.path("eval", "metrics.json"))
    return [ws.path("eval", "metrics.json")], out


STAGE_FUNCS = {
    "synth": stage_synth, "train": stage_train, "visibility": stage_visibility, "align": stage_align,
    "fuse-bg": stage_fuse_bg, "segment": stage_segment, "match": stage_match, "fuse-obj": stage_fuse_obj,
    "eval": stage_eval,
}


def run_stage(ws: Workspace, stage: str, force: bool = False) -> StageRecord:
    if stage not in STAGE_FUNCS:
        raise ValueError(f"unknown stage {stage}")
    if not force and ws.up_to_date(stage):
        log.info("stage %s up to date, skipping", stage)
        return StageRecord(stage, "skipped", 0.0, ws.manifest[stage].get("info", {}))
    inp = ws.input_hash(stage)
    start = time.perf_counter()
    log.info("running stage %s", stage)
    try:
        outputs, info = STAGE_FUNCS[stage](ws)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(stage, str(exc)) from exc
    seconds = time.perf_counter() - start
    info = json.loads(json.dumps(info, default=_json_default))
    ws.manifest[stage] = {"input": inp, "outputs": {ws.rel(p): sha256_file(p) for p in outputs}, "info": info,
                          "seconds": seconds}
    ws.save_manifest()
    return StageRecord(stage, "ran", seconds, info)


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def run_pipeline(config: PipelineConfig, stages=STAGES, force: bool = False) -> PipelineReport:
    """Run the requested stages in order, skipping those whose inputs and outputs are unchanged."""
    ws = Workspace(config)
    report = PipelineReport()
    for stage in STAGES:
        if stage not in stages:
            continue
        rec = run_stage(ws, stage, force)
        report.stages.append(rec)
        if stage == "fuse-bg" and ws.num_scenes() < 2:
            report.notices.append(N1_NOTICE)
            log.warning(N1_NOTICE)
            break
        if stage == "segment":
            for s in rec.info.get("scenes", []):
                report.notices += s.get("notes", [])
    _json_dump(report.to_dict(), ws.path("report.json"))
    return report
