"""Scene (Sim(3)) and object (SE(3)) registration, FPFH descriptors and object matching."""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from . import _ransac
from .geometry import PointCloud, voxel_downsample
from .poses import PoseSE3, PoseSim3, orthonormalize

log = logging.getLogger(__name__)

MATCH_THRESHOLD = 0.5


@dataclass(frozen=True)
class RegistrationResult:
    pose: PoseSim3
    fitness: float
    inlier_rmse: float

    def __post_init__(self):
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError("fitness must lie in [0, 1]")


# ---------------------------------------------------------------------------
# closed-form fits

def _batched_fit(src: np.ndarray, dst: np.ndarray, with_scale: bool):
    """Least-squares similarity (or rigid) fits for stacks of point sets, shape (B, n, 3).

    Returns rotations (B, 3, 3), translations (B, 3), scales (B,).
    """
    mu_s = src.mean(axis=1, keepdims=True)
    mu_d = dst.mean(axis=1, keepdims=True)
    xs = src - mu_s
    xd = dst - mu_d
    cov = np.einsum("bni,bnj->bij", xd, xs) / src.shape[1]
    u, sv, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    d[d == 0] = 1.0
    fix = np.ones((len(src), 3))
    fix[:, 2] = d
    rot = u @ (fix[:, :, None] * vt)
    if with_scale:
        var_s = (xs ** 2).sum(axis=(1, 2)) / src.shape[1]
        scale = (sv * fix).sum(axis=1) / np.where(var_s > 0, var_s, 1.0)
    else:
        scale = np.ones(len(src))
    trans = mu_d[:, 0] - scale[:, None] * np.einsum("bij,bj->bi", rot, mu_s[:, 0])
    return rot, trans, scale


def umeyama(src, dst, with_scale: bool = True) -> PoseSim3:
    """Closed-form similarity (or rigid) transform minimizing sum ||dst - T(src)||^2."""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) != len(dst) or len(src) < 3:
        raise ValueError("need at least 3 paired points")
    rot, trans, scale = _batched_fit(src[None], dst[None], with_scale)
    r = orthonormalize(rot[0])
    if with_scale:
        if not scale[0] > 0:
            raise ValueError("degenerate point configuration")
        return PoseSim3(r, trans[0], scale[0])
    return PoseSE3(r, trans[0])


def _apply_batch(rot, trans, scale, pts):
    return scale[:, None, None] * np.einsum("bij,nj->bni", rot, pts) + trans[:, None, :]


def _triangle_ok(tri: np.ndarray, min_ratio: float = 1e-3) -> np.ndarray:
    """Reject near-collinear triples: area relative to squared longest edge."""
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    edge = np.max(np.stack([np.sum((b - a) ** 2, 1), np.sum((c - a) ** 2, 1), np.sum((c - b) ** 2, 1)]), axis=0)
    return area2 > min_ratio * np.where(edge > 0, edge, np.inf)


def _needed_iterations(inlier_ratio: float, confidence: float, sample_size: int = 3) -> float:
    w = inlier_ratio ** sample_size
    if w <= 0:
        return math.inf
    if w >= 1:
        return 0
    return math.log(1 - confidence) / math.log(1 - w)


@dataclass(frozen=True)
class RansacConfig:
    max_iterations: int = 100_000
    threshold: float | None = None      # inlier distance; default 1% of the target point spread
    confidence: float = 0.999
    batch: int = 512
    seed: int = 0


def solve_sim3_correspondences(src_points, dst_points, config: RansacConfig | None = None) -> PoseSim3:
    """Robust Sim(3) from paired points: RANSAC over triples, then a closed-form refit on inliers."""
    cfg = config or RansacConfig()
    src = np.asarray(src_points, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst_points, dtype=np.float64).reshape(-1, 3)
    n = len(src)
    if n != len(dst):
        raise ValueError("correspondence lists differ in length")
    if n < 3:
        raise ValueError("need at least 3 correspondences")
    spread = float(np.sqrt(((dst - dst.mean(0)) ** 2).sum(1).mean()))
    thr = cfg.threshold if cfg.threshold is not None else 0.01 * max(spread, 1e-12)
    rng = np.random.default_rng(cfg.seed)
    best_count, best_mask = -1, None
    done = 0
    budget = cfg.max_iterations
    while done < min(budget, cfg.max_iterations):
        b = min(cfg.batch, cfg.max_iterations - done)
        idx = _sample_triples(rng, n, b)
        done += b
        ok = _triangle_ok(src[idx]) & _triangle_ok(dst[idx])
        if not ok.any():
            continue
        idx = idx[ok]
        rot, trans, scale = _batched_fit(src[idx], dst[idx], True)
        good = scale > 0
        if not good.any():
            continue
        rot, trans, scale = rot[good], trans[good], scale[good]
        res = np.linalg.norm(_apply_batch(rot, trans, scale, src) - dst[None], axis=2)
        counts = (res < thr).sum(axis=1)
        k = int(np.argmax(counts))
        if counts[k] > best_count:
            best_count = int(counts[k])
            best_mask = res[k] < thr
            budget = _needed_iterations(best_count / n, cfg.confidence)
    if best_mask is None or best_count < 3:
        raise ValueError("all sampled triples were degenerate")
    pose = umeyama(src[best_mask], dst[best_mask])
    # one re-selection pass with the refined model
    mask = np.linalg.norm(pose.apply(src) - dst, axis=1) < thr
    if mask.sum() >= best_count:
        pose = umeyama(src[mask], dst[mask])
    return pose


def _sample_triples(rng: np.random.Generator, n: int, b: int) -> np.ndarray:
    """b distinct-index triples drawn uniformly from range(n)."""
    i = rng.integers(0, n, size=b)
    j = rng.integers(0, n - 1, size=b)
    j = j + (j >= i)
    lo, hi = np.minimum(i, j), np.maximum(i, j)
    k = rng.integers(0, n - 2, size=b)
    k = k + (k >= lo)
    k = k + (k >= hi)
    return np.stack([i, j, k], 1)


# ---------------------------------------------------------------------------
# ICP

@dataclass(frozen=True)
class IcpConfig:
    max_distance: float
    max_iterations: int = 50
    relative_rmse: float = 1e-6


def _evaluate(src_pts, tree: cKDTree, pose: PoseSim3, max_distance: float):
    moved = pose.apply(src_pts)
    d, idx = tree.query(moved, k=1, distance_upper_bound=max_distance)
    inl = np.isfinite(d)
    rmse = float(np.sqrt(np.mean(d[inl] ** 2))) if inl.any() else 0.0
    return moved, idx, inl, rmse


def icp_point_to_plane(src: PointCloud, dst: PointCloud, init: PoseSim3 | None = None,
                       config: IcpConfig | None = None) -> RegistrationResult:
    """Point-to-plane ICP; the scale of `init` is held fixed and only R, t are refined."""
    if dst.normals is None:
        raise ValueError("target cloud needs normals")
    if config is None:
        raise ValueError("an IcpConfig with max_distance is required")
    pose = init if init is not None else PoseSE3.identity()
    if len(src) == 0 or len(dst) == 0:
        return RegistrationResult(pose, 0.0, 0.0)
    tree = cKDTree(dst.points)
    moved, idx, inl, rmse = _evaluate(src.points, tree, pose, config.max_distance)
    if not inl.any():
        return RegistrationResult(pose, 0.0, 0.0)
    for _ in range(config.max_iterations):
        p = moved[inl]
        q = dst.points[idx[inl]]
        nrm = dst.normals[idx[inl]]
        a = np.hstack([np.cross(p, nrm), nrm])
        r = -np.einsum("ij,ij->i", p - q, nrm)
        try:
            x = np.linalg.solve(a.T @ a + 1e-12 * np.eye(6), a.T @ r)
        except np.linalg.LinAlgError:
            break
        omega, t = x[:3], x[3:]
        angle = np.linalg.norm(omega)
        rot = np.eye(3) if angle == 0 else _axis_angle(omega / angle, angle)
        delta = PoseSE3(rot, t)
        cand = delta.compose(pose)
        if not isinstance(pose, PoseSE3) and isinstance(cand, PoseSE3):
            cand = PoseSim3(cand.rotation, cand.translation, cand.scale)
        c_moved, c_idx, c_inl, c_rmse = _evaluate(src.points, tree, cand, config.max_distance)
        if not c_inl.any() or c_rmse > rmse:
            break
        change = abs(rmse - c_rmse) / max(rmse, 1e-12)
        pose, moved, idx, inl, rmse = cand, c_moved, c_idx, c_inl, c_rmse
        if change < config.relative_rmse:
            break
    return RegistrationResult(pose, float(inl.mean()), rmse)


def _axis_angle(axis, angle):
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


# ---------------------------------------------------------------------------
# FPFH

def _pair_features(p1, n1, p2, n2):
    """(f1, f2, f3) angular triplet per pair, with the usual source/target swap rule."""
    dp = p2 - p1
    f4 = np.linalg.norm(dp, axis=1)
    valid = f4 > 0
    f4s = np.where(valid, f4, 1.0)
    a1 = np.einsum("ij,ij->i", n1, dp) / f4s
    a2 = np.einsum("ij,ij->i", n2, dp) / f4s
    swap = np.arccos(np.clip(np.abs(a1), 0, 1)) > np.arccos(np.clip(np.abs(a2), 0, 1))
    m1 = np.where(swap[:, None], n2, n1)
    m2 = np.where(swap[:, None], n1, n2)
    dp = np.where(swap[:, None], -dp, dp)
    f3 = np.where(swap, -a2, a1)
    v = np.cross(dp, m1)
    vn = np.linalg.norm(v, axis=1)
    valid &= vn > 0
    v = v / np.where(vn > 0, vn, 1.0)[:, None]
    w = np.cross(m1, v)
    f2 = np.einsum("ij,ij->i", v, m2)
    f1 = np.arctan2(np.einsum("ij,ij->i", w, m2), np.einsum("ij,ij->i", m1, m2))
    return np.where(valid, f1, 0.0), np.where(valid, f2, 0.0), np.where(valid, f3, 0.0), valid


def _bins(f, lo, hi):
    return np.clip(np.floor(11 * (f - lo) / (hi - lo)).astype(np.int64), 0, 10)


def compute_fpfh(cloud: PointCloud, radius: float, max_nn: int = 100) -> np.ndarray:
    """(n, 33) fast point feature histograms over neighbours within `radius` (at most max_nn)."""
    if cloud.normals is None:
        raise ValueError("FPFH needs normals")
    if not radius > 0:
        raise ValueError("radius must be positive")
    pts, nrm = cloud.points, cloud.normals
    n = len(pts)
    if n == 0:
        return np.zeros((0, 33))
    k = min(max_nn, n)
    dist, nb = cKDTree(pts).query(pts, k=k, distance_upper_bound=radius)
    nb = nb.reshape(n, k)
    dist = dist.reshape(n, k)
    has = np.isfinite(dist) & (nb != np.arange(n)[:, None])
    ii, kk = np.nonzero(has)
    jj = nb[ii, kk]
    d2 = dist[ii, kk] ** 2
    count = has.sum(axis=1)
    f1, f2, f3, valid = _pair_features(pts[ii], nrm[ii], pts[jj], nrm[jj])
    incr = 100.0 / np.where(count > 0, count, 1)
    spfh = np.zeros((n, 33))
    for off, f, lo, hi in ((0, f1, -np.pi, np.pi), (11, f2, -1.0, 1.0), (22, f3, -1.0, 1.0)):
        np.add.at(spfh, (ii[valid], off + _bins(f[valid], lo, hi)), incr[ii[valid]])
    fpfh = np.zeros((n, 33))
    use = d2 > 0
    wts = 1.0 / d2[use]
    np.add.at(fpfh, ii[use], spfh[jj[use]] * wts[:, None])
    for off in (0, 11, 22):
        block = fpfh[:, off:off + 11]
        s = block.sum(axis=1, keepdims=True)
        block *= np.where(s > 0, 100.0 / np.where(s > 0, s, 1.0), 0.0)
    return fpfh + spfh


# ---------------------------------------------------------------------------
# global registration

@dataclass(frozen=True)
class GlobalConfig:
    voxel: float                        # working resolution; other radii derive from it
    normal_radius_factor: float = 2.0
    feature_radius_factor: float = 5.0
    distance_factor: float = 1.5        # RANSAC inlier distance, in voxels
    icp_distance_factor: float = 1.0    # refinement correspondence distance, in voxels
    edge_similarity: float = 0.9
    max_iterations: int = 4_000_000
    confidence: float = 0.999
    min_inlier_fraction: float = 0.02
    seed: int = 0

    @classmethod
    def for_cloud(cls, cloud: PointCloud, points_across: float = 30.0, **kw) -> "GlobalConfig":
        return cls(voxel=cloud.diameter() / points_across, **kw)


def _prepare(cloud: PointCloud, cfg: GlobalConfig) -> PointCloud:
    down = voxel_downsample(cloud, cfg.voxel)
    if down.normals is None:
        raise ValueError("registration needs normals")
    return down


def global_register(src: PointCloud, dst: PointCloud, config: GlobalConfig) -> RegistrationResult:
    """Feature-matched RANSAC for a rigid pose taking src onto dst."""
    cfg = config
    if src.normals is None or dst.normals is None:
        raise ValueError("registration needs normals")
    s = _prepare(src, cfg)
    d = _prepare(dst, cfg)
    if len(s) < 3 or len(d) < 3:
        return RegistrationResult(PoseSE3.identity(), 0.0, 0.0)
    fs = compute_fpfh(s, cfg.feature_radius_factor * cfg.voxel)
    fd = compute_fpfh(d, cfg.feature_radius_factor * cfg.voxel)
    _, match = cKDTree(fd).query(fs, k=1)
    cs, cd = s.points, d.points[match]
    ncorr = len(cs)
    thr = cfg.distance_factor * cfg.voxel
    rot, trans, count, _ = _ransac.ransac_rigid(np.ascontiguousarray(cs), np.ascontiguousarray(cd), thr,
                                                cfg.edge_similarity, cfg.max_iterations, cfg.confidence,
                                                cfg.seed)
    if count < max(3, cfg.min_inlier_fraction * ncorr):
        return RegistrationResult(PoseSE3.identity(), 0.0, 0.0)
    pose = PoseSE3(orthonormalize(rot), trans)
    dist, _ = cKDTree(d.points).query(pose.apply(s.points), k=1, distance_upper_bound=thr)
    inl = np.isfinite(dist)
    rmse = float(np.sqrt(np.mean(dist[inl] ** 2))) if inl.any() else 0.0
    return RegistrationResult(pose, float(inl.mean()), rmse)


def register_pair(src: PointCloud, dst: PointCloud, config: GlobalConfig) -> RegistrationResult:
    """Global registration followed by point-to-plane refinement on the full clouds."""
    coarse = global_register(src, dst, config)
    if coarse.fitness == 0.0:
        return coarse
    icp = IcpConfig(max_distance=config.icp_distance_factor * config.voxel)
    fine = icp_point_to_plane(src, dst, coarse.pose, icp)
    return fine


def register_scene(scene_cloud: PointCloud, ref_cloud: PointCloud, init: PoseSim3,
                   max_distance: float) -> RegistrationResult:
    """Refine a camera-derived Sim(3) with ICP against the reference cloud (scale kept)."""
    moved = scene_cloud.transformed(init)
    res = icp_point_to_plane(moved, ref_cloud, PoseSE3.identity(), IcpConfig(max_distance=max_distance))
    return RegistrationResult(res.pose.compose(init), res.fitness, res.inlier_rmse)


# ---------------------------------------------------------------------------
# object matching

@dataclass
class MatchResult:
    assignment: list[int]          # assignment[j] = index of the scene cloud matched to reference object j
    poses: list[PoseSE3]           # reference object frame -> scene frame
    fitness: np.ndarray            # fitness[j, k] for reference j vs scene cloud k
    accepted: list[bool]

    def to_dict(self) -> dict:
        return {"assignment": [int(a) for a in self.assignment],
                "poses": [p.to_dict() for p in self.poses],
                "fitness": self.fitness.tolist(),
                "accepted": [bool(a) for a in self.accepted]}

    @classmethod
    def from_dict(cls, d: dict) -> "MatchResult":
        return cls([int(a) for a in d["assignment"]], [PoseSE3.from_dict(p) for p in d["poses"]],
                   np.asarray(d["fitness"], dtype=np.float64), [bool(a) for a in d["accepted"]])


def hungarian(score: np.ndarray) -> list[int]:
    """Column assigned to each row, maximizing the total score."""
    rows, cols = linear_sum_assignment(np.asarray(score, dtype=np.float64), maximize=True)
    out = [0] * len(rows)
    for r, c in zip(rows, cols):
        out[r] = int(c)
    return out


def brute_force_assignment(score: np.ndarray) -> list[int]:
    score = np.asarray(score, dtype=np.float64)
    m = len(score)
    best, arg = -np.inf, None
    for perm in itertools.permutations(range(m)):
        total = score[np.arange(m), perm].sum()
        if total > best + 1e-12:
            best, arg = total, list(perm)
    return arg


def match_objects(ref_clouds: list[PointCloud], scene_clouds: list[PointCloud],
                  config: GlobalConfig | None = None, threshold: float = MATCH_THRESHOLD) -> MatchResult:
    """Register every reference object against every scene object and solve the assignment."""
    m = len(ref_clouds)
    if m != len(scene_clouds):
        raise ValueError(f"object count mismatch: {m} reference vs {len(scene_clouds)} scene clouds")
    if m == 0:
        return MatchResult([], [], np.zeros((0, 0)), [])
    results = {}
    score = np.zeros((m, m))
    for j, ref in enumerate(ref_clouds):
        cfg = config or GlobalConfig.for_cloud(ref)
        for k, cand in enumerate(scene_clouds):
            res = register_pair(ref, cand, cfg)
            results[j, k] = res
            score[j, k] = res.fitness
    assign = hungarian(score)
    poses = [PoseSE3(results[j, k].pose.rotation, results[j, k].pose.translation) for j, k in enumerate(assign)]
    accepted = [bool(score[j, k] >= threshold) for j, k in enumerate(assign)]
    return MatchResult(assign, poses, score, accepted)
