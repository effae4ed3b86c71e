"""Meshes and point clouds extracted from density grids, plus nearest-neighbour helpers and PLY IO."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree
from skimage import measure

from . import _march
from .field import VoxelRadianceField

ISO_THICKNESS = 0.3   # default iso level, in optical thickness per smallest voxel edge


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if len(self.normals) != len(self.vertices):
            raise ValueError("one normal per vertex required")
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")

    @property
    def is_empty(self) -> bool:
        return len(self.triangles) == 0

    def triangle_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.triangles[:, k]] for k in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


@dataclass(eq=False)
class PointCloud:
    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(self.normals) != len(self.points):
                raise ValueError("normals must match points")
            if len(self.normals) and np.max(np.abs(np.linalg.norm(self.normals, axis=1) - 1)) > 1e-6:
                raise ValueError("normals must be unit length")
        if self.labels is not None:
            self.labels = np.asarray(self.labels).reshape(-1)
            if len(self.labels) != len(self.points):
                raise ValueError("labels must match points")

    def __len__(self) -> int:
        return len(self.points)

    def subset(self, mask_or_index) -> "PointCloud":
        return PointCloud(self.points[mask_or_index],
                          None if self.normals is None else self.normals[mask_or_index],
                          None if self.labels is None else self.labels[mask_or_index])

    def transformed(self, pose) -> "PointCloud":
        normals = None if self.normals is None else _unit(pose.apply_direction(self.normals))
        return PointCloud(pose.apply(self.points), normals, self.labels)

    def with_labels(self, labels) -> "PointCloud":
        return PointCloud(self.points, self.normals, labels)

    @staticmethod
    def concatenate(clouds: list["PointCloud"]) -> "PointCloud":
        if not clouds:
            return PointCloud(np.zeros((0, 3)))
        pts = np.concatenate([c.points for c in clouds])
        normals = None
        if all(c.normals is not None for c in clouds):
            normals = np.concatenate([c.normals for c in clouds])
        labels = None
        if all(c.labels is not None for c in clouds):
            labels = np.concatenate([c.labels for c in clouds])
        return PointCloud(pts, normals, labels)

    def bounds(self) -> np.ndarray:
        return np.stack([self.points.min(axis=0), self.points.max(axis=0)])

    def diameter(self) -> float:
        b = self.bounds()
        return float(np.linalg.norm(b[1] - b[0]))


def default_iso(field: VoxelRadianceField) -> float:
    return ISO_THICKNESS / field.voxel_size


def marching_cubes(field: VoxelRadianceField, iso_sigma: float | None = None) -> TriangleMesh:
    """Isosurface of the density grid; normals point toward decreasing density."""
    iso = default_iso(field) if iso_sigma is None else float(iso_sigma)
    if not iso > 0:
        raise ValueError("iso_sigma must be positive")
    dens = field.density
    if not (dens.min() < iso < dens.max()):
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((0, 3)))
    sp = field.spacing
    verts, faces, _, _ = measure.marching_cubes(dens, level=iso, spacing=tuple(sp), allow_degenerate=False)
    verts = verts + field.aabb[0]
    # gradient of the density grid, sampled trilinearly at the vertices
    grads = np.gradient(dens, *sp)
    lo, inv_sp = field.aabb[0].copy(), 1.0 / sp
    dims = np.array(field.resolution, dtype=np.int64)
    g = np.stack([_march.sample_scalar_clamped(np.ascontiguousarray(gr), lo, inv_sp, dims, verts)
                  for gr in grads], 1)
    normals = -g
    # faces are wound so that their normals follow skimage's descent convention; use them as fallback
    bad = np.linalg.norm(normals, axis=1) < 1e-12
    if bad.any():
        fn = np.zeros_like(verts)
        a, b, c = (verts[faces[:, k]] for k in range(3))
        cr = np.cross(b - a, c - a)
        for k in range(3):
            np.add.at(fn, faces[:, k], cr)
        normals[bad] = fn[bad]
    normals = _unit(normals)
    normals[np.linalg.norm(normals, axis=1) == 0] = (0.0, 0.0, 1.0)
    return TriangleMesh(verts, faces, normals)


def face_normals(mesh: TriangleMesh) -> np.ndarray:
    """Unit triangle normals, flipped to agree with the mean of their vertex normals."""
    a, b, c = (mesh.vertices[mesh.triangles[:, k]] for k in range(3))
    n = np.cross(b - a, c - a)
    ref = mesh.normals[mesh.triangles].sum(axis=1)
    n = np.where((np.einsum("ij,ij->i", n, ref) < 0)[:, None], -n, n)
    bad = np.linalg.norm(n, axis=1) == 0
    n[bad] = ref[bad]
    return _unit(n)


def sample_surface(mesh: TriangleMesh, count: int, seed: int = 0) -> PointCloud:
    """Area-weighted uniform samples on the mesh surface, carrying triangle normals."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    if count < 1:
        raise ValueError("count must be positive")
    rng = np.random.default_rng(seed)
    areas = mesh.triangle_areas()
    total = areas.sum()
    if not total > 0:
        raise ValueError("mesh has zero surface area")
    tri = rng.choice(len(areas), size=count, p=areas / total)
    r1 = np.sqrt(rng.random(count))
    r2 = rng.random(count)
    a, b, c = (mesh.vertices[mesh.triangles[tri, k]] for k in range(3))
    pts = (1 - r1)[:, None] * a + (r1 * (1 - r2))[:, None] * b + (r1 * r2)[:, None] * c
    return PointCloud(pts, face_normals(mesh)[tri])


class NearestIndex:
    """Exact nearest-neighbour queries against a fixed cloud."""

    def __init__(self, target: PointCloud | np.ndarray):
        pts = target.points if isinstance(target, PointCloud) else np.asarray(target, dtype=np.float64)
        if len(pts) == 0:
            raise ValueError("target cloud is empty")
        self.points = pts.reshape(-1, 3)
        self.tree = cKDTree(self.points)

    def query(self, x, distance_upper_bound=np.inf):
        return self.tree.query(np.asarray(x, dtype=np.float64), k=1, distance_upper_bound=distance_upper_bound)


def nearest_distances(queries, target: PointCloud | np.ndarray) -> np.ndarray:
    d, _ = NearestIndex(target).query(np.asarray(queries, dtype=np.float64).reshape(-1, 3))
    return d


def nearest_distance(query, target: PointCloud | np.ndarray) -> float:
    return float(nearest_distances(np.asarray(query).reshape(1, 3), target)[0])


def voxel_downsample(cloud: PointCloud, leaf: float) -> PointCloud:
    """One point per occupied voxel: the mean position (and renormalized mean normal)."""
    if not leaf > 0:
        raise ValueError("leaf must be positive")
    if len(cloud) == 0:
        return cloud
    keys = np.floor(cloud.points / leaf).astype(np.int64)
    _, inv, counts = np.unique(keys, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    n = len(counts)
    pts = np.zeros((n, 3))
    np.add.at(pts, inv, cloud.points)
    pts /= counts[:, None]
    normals = None
    if cloud.normals is not None:
        normals = np.zeros((n, 3))
        np.add.at(normals, inv, cloud.normals)
        zero = np.linalg.norm(normals, axis=1) < 1e-12
        first = np.zeros(n, dtype=np.int64)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        normals[zero] = cloud.normals[first[zero]]
        normals = _unit(normals)
    labels = None
    if cloud.labels is not None:
        first = np.zeros(n, dtype=np.int64)
        first[inv[::-1]] = np.arange(len(inv))[::-1]
        labels = cloud.labels[first]
    return PointCloud(pts, normals, labels)


def estimate_normals(points: np.ndarray, k: int = 16, viewpoint=None) -> np.ndarray:
    """PCA normals from k nearest neighbours, oriented away from `viewpoint` (default: centroid)."""
    pts = np.asarray(points, dtype=np.float64)
    k = min(k, len(pts))
    _, idx = cKDTree(pts).query(pts, k=k)
    nb = pts[idx] - pts[idx].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", nb, nb)
    _, vecs = np.linalg.eigh(cov)
    n = vecs[:, :, 0]
    ref = pts.mean(axis=0) if viewpoint is None else np.asarray(viewpoint, dtype=np.float64)
    flip = np.einsum("ij,ij->i", n, pts - ref) < 0
    n[flip] *= -1
    return _unit(n)


# ---------------------------------------------------------------------------
# PLY (binary little-endian)

_PLY_TYPES = {"double": "<f8", "float": "<f4", "uchar": "u1", "int": "<i4", "uint": "<u4",
              "float64": "<f8", "float32": "<f4", "uint8": "u1", "int32": "<i4", "uint32": "<u4"}


def _vertex_dtype(has_normals: bool, has_labels: bool):
    fields = [("x", "<f8"), ("y", "<f8"), ("z", "<f8")]
    if has_normals:
        fields += [("nx", "<f8"), ("ny", "<f8"), ("nz", "<f8")]
    if has_labels:
        fields += [("label", "u1")]
    return np.dtype(fields)


def _ply_header(nv: int, dtype: np.dtype, nf: int | None) -> bytes:
    names = {"<f8": "double", "u1": "uchar"}
    lines = ["ply", "format binary_little_endian 1.0", f"element vertex {nv}"]
    for name in dtype.names:
        lines.append(f"property {names[dtype[name].str.replace('|', '')]} {name}")
    if nf is not None:
        lines += [f"element face {nf}", "property list uchar int vertex_indices"]
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _vertex_block(points, normals, labels) -> np.ndarray:
    dtype = _vertex_dtype(normals is not None, labels is not None)
    arr = np.zeros(len(points), dtype=dtype)
    arr["x"], arr["y"], arr["z"] = points.T
    if normals is not None:
        arr["nx"], arr["ny"], arr["nz"] = normals.T
    if labels is not None:
        lab = np.asarray(labels)
        if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
            raise ValueError("labels must fit in uint8")
        arr["label"] = lab.astype(np.uint8)
    return arr


def write_ply(path, cloud: PointCloud) -> None:
    arr = _vertex_block(cloud.points, cloud.normals, cloud.labels)
    with open(path, "wb") as fh:
        fh.write(_ply_header(len(arr), arr.dtype, None))
        fh.write(arr.tobytes())


def write_mesh_ply(path, mesh: TriangleMesh) -> None:
    arr = _vertex_block(mesh.vertices, mesh.normals, None)
    faces = np.zeros(len(mesh.triangles), dtype=np.dtype([("n", "u1"), ("idx", "<i4", (3,))]))
    faces["n"] = 3
    faces["idx"] = mesh.triangles
    with open(path, "wb") as fh:
        fh.write(_ply_header(len(arr), arr.dtype, len(faces)))
        fh.write(arr.tobytes())
        fh.write(faces.tobytes())


def _read_ply(path):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        elements = []
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: truncated header")
            tok = line.decode("ascii").split()
            if not tok:
                continue
            if tok[0] == "format" and tok[1] != "binary_little_endian":
                raise ValueError(f"{path}: only binary little-endian PLY is supported")
            elif tok[0] == "element":
                elements.append((tok[1], int(tok[2]), []))
            elif tok[0] == "property":
                elements[-1][2].append(tok[1:])
            elif tok[0] == "end_header":
                break
        out = {}
        for name, count, props in elements:
            if props and props[0][0] == "list":
                _, ctype, itype, pname = props[0]
                dtype = np.dtype([("n", _PLY_TYPES[ctype]), (pname, _PLY_TYPES[itype], (3,))])
                data = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
                if count and np.any(data["n"] != 3):
                    raise ValueError(f"{path}: only triangle faces are supported")
                out[name] = data[pname].astype(np.int64)
            else:
                dtype = np.dtype([(p[1], _PLY_TYPES[p[0]]) for p in props])
                out[name] = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype)
    return out


def read_ply(path) -> PointCloud:
    v = _read_ply(path)["vertex"]
    names = v.dtype.names
    pts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    normals = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64) if "nx" in names else None
    labels = v["label"].astype(np.uint8) if "label" in names else None
    return PointCloud(pts, normals, labels)


def read_mesh_ply(path) -> TriangleMesh:
    data = _read_ply(path)
    v = data["vertex"]
    pts = np.stack([v["x"], v["y"], v["z"]], 1).astype(np.float64)
    normals = np.stack([v["nx"], v["ny"], v["nz"]], 1).astype(np.float64)
    return TriangleMesh(pts, data.get("face", np.zeros((0, 3), dtype=np.int64)), normals)
