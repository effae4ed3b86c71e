"""Foreground extraction by differencing against a clean background, then density-based clustering."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .geometry import PointCloud, nearest_distances

log = logging.getLogger(__name__)

LABEL_BACKGROUND = 0
LABEL_RESIDUAL = 255


def background_diff(scene_cloud: PointCloud, background_cloud: PointCloud, threshold: float):
    """(foreground, background, foreground mask): a point is foreground iff it is farther than
    `threshold` from every background point."""
    if len(background_cloud) == 0:
        raise ValueError("background cloud is empty")
    if not threshold > 0:
        raise ValueError("threshold must be positive")
    if len(scene_cloud) == 0:
        mask = np.zeros(0, dtype=bool)
    else:
        mask = nearest_distances(scene_cloud.points, background_cloud) > threshold
    return scene_cloud.subset(mask), scene_cloud.subset(~mask), mask


def dbscan_labels(points: np.ndarray, eps: float, min_points: int) -> np.ndarray:
    """Cluster index per point (-1 for noise), clusters ordered by size then centroid.

    A point is core when at least `min_points` points (itself included) lie within eps.
    Core points within eps of each other share a cluster. A non-core point within eps of a
    core point joins the cluster of its nearest core point; ties go to the lexicographically
    smallest core position, which keeps the result independent of input order.
    """
    if not eps > 0 or min_points < 1:
        raise ValueError("need eps > 0 and min_points >= 1")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    tree = cKDTree(pts)
    pairs = tree.query_pairs(eps, output_type="ndarray")
    deg = np.ones(n, dtype=np.int64)
    np.add.at(deg, pairs[:, 0], 1)
    np.add.at(deg, pairs[:, 1], 1)
    core = deg >= min_points
    cc = pairs[core[pairs[:, 0]] & core[pairs[:, 1]]]
    core_idx = np.flatnonzero(core)
    if len(core_idx) == 0:
        return labels
    remap = np.full(n, -1, dtype=np.int64)
    remap[core_idx] = np.arange(len(core_idx))
    graph = coo_matrix((np.ones(len(cc)), (remap[cc[:, 0]], remap[cc[:, 1]])),
                       shape=(len(core_idx), len(core_idx)))
    _, comp = connected_components(graph, directed=False)
    labels[core_idx] = comp
    # border points
    border = np.flatnonzero(~core)
    if len(border):
        ctree = cKDTree(pts[core_idx])
        near = ctree.query_ball_point(pts[border], eps)
        for b, cands in zip(border, near):
            if not cands:
                continue
            cands = np.asarray(cands)
            d = np.linalg.norm(pts[core_idx[cands]] - pts[b], axis=1)
            tie = cands[d == d.min()]
            if len(tie) > 1:
                cp = pts[core_idx[tie]]
                tie = tie[np.lexsort(cp.T[::-1])]
            labels[b] = comp[tie[0]]
    return _canonical_order(pts, labels)


def _canonical_order(pts: np.ndarray, labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels[labels >= 0])
    if len(ids) == 0:
        return labels
    sizes = np.array([np.sum(labels == i) for i in ids])
    cents = np.array([pts[labels == i].mean(axis=0) for i in ids])
    order = np.lexsort((cents[:, 2], cents[:, 1], cents[:, 0], -sizes))
    out = np.full_like(labels, -1)
    for new, k in enumerate(order):
        out[labels == ids[k]] = new
    return out


def cluster(cloud: PointCloud, eps: float, min_points: int):
    """(clusters, noise) as point clouds."""
    labels = dbscan_labels(cloud.points, eps, min_points)
    k = labels.max() + 1 if len(labels) else 0
    return [cloud.subset(labels == i) for i in range(k)], cloud.subset(labels < 0)


def median_spacing(points: np.ndarray) -> float:
    if len(points) < 2:
        return 0.0
    d, _ = cKDTree(points).query(points, k=2)
    return float(np.median(d[:, 1]))


@dataclass(frozen=True)
class SegmentConfig:
    threshold: float
    eps: float | None = None           # default: 3x median nearest-neighbour spacing
    min_points: int = 10
    min_object_points: int = 50
    expected_objects: int | None = None


@dataclass
class SegmentationResult:
    background_cloud: PointCloud
    object_clouds: list[PointCloud]
    residual_cloud: PointCloud
    labels: np.ndarray                 # per input point: 0 background, 1..K objects, 255 residual
    count_mismatch: bool = False
    notes: list[str] = field(default_factory=list)

    def labeled_cloud(self, scene_cloud: PointCloud) -> PointCloud:
        return scene_cloud.with_labels(self.labels.astype(np.uint8))


def segment_scene(scene_cloud: PointCloud, background_cloud: PointCloud, config: SegmentConfig) -> SegmentationResult:
    """Split a scene cloud into background, per-object clusters and residual points."""
    fg, _, fg_mask = background_diff(scene_cloud, background_cloud, config.threshold)
    labels = np.zeros(len(scene_cloud), dtype=np.int64)
    fg_idx = np.flatnonzero(fg_mask)
    objects = []
    if len(fg):
        eps = config.eps if config.eps is not None else 3.0 * median_spacing(scene_cloud.points)
        lab = dbscan_labels(fg.points, eps, config.min_points) if eps > 0 else np.full(len(fg), -1)
        labels[fg_idx] = LABEL_RESIDUAL
        for c in range(lab.max() + 1 if len(lab) else 0):
            members = lab == c
            if members.sum() < config.min_object_points:
                continue
            objects.append(fg.subset(members))
            if len(objects) > 254:
                raise ValueError("too many clusters for uint8 labels")
            labels[fg_idx[members]] = len(objects)
    notes = []
    mismatch = config.expected_objects is not None and len(objects) != config.expected_objects
    if mismatch:
        notes.append(f"found {len(objects)} object clusters, expected {config.expected_objects}; "
                     "objects may be touching or only partly separated from the background")
        log.warning(notes[-1])
    return SegmentationResult(scene_cloud.subset(labels == LABEL_BACKGROUND), objects,
                              scene_cloud.subset(labels == LABEL_RESIDUAL), labels, mismatch, notes)
