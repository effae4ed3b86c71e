"""Rigid (SE(3)) and similarity (Sim(3)) transforms acting on row-vector point arrays."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_rotation(rotation) -> np.ndarray:
    r = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-6 or np.linalg.det(r) < 0:
        raise ValueError("rotation must be orthonormal with det +1")
    return r


def orthonormalize(rotation: np.ndarray) -> np.ndarray:
    """Project a near-rotation onto SO(3)."""
    u, _, vt = np.linalg.svd(rotation)
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_angle(rotation: np.ndarray) -> float:
    """Geodesic angle (radians) of a rotation matrix."""
    c = (np.trace(rotation) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


@dataclass(frozen=True, eq=False)
class PoseSim3:
    """x -> scale * R x + t."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return self.scale * (p @ self.rotation.T) + self.translation

    def apply_direction(self, dirs) -> np.ndarray:
        return np.asarray(dirs, dtype=np.float64) @ self.rotation.T

    def inverse(self):
        r_inv = self.rotation.T
        s_inv = 1.0 / self.scale
        t_inv = -s_inv * (r_inv @ self.translation)
        if isinstance(self, PoseSE3):
            return PoseSE3(r_inv, t_inv)
        return PoseSim3(r_inv, t_inv, s_inv)

    def compose(self, other: "PoseSim3"):
        """Return self ∘ other (apply `other` first)."""
        r = self.rotation @ other.rotation
        t = self.scale * (self.rotation @ other.translation) + self.translation
        s = self.scale * other.scale
        if isinstance(self, PoseSE3) and isinstance(other, PoseSE3):
            return PoseSE3(orthonormalize(r), t)
        return PoseSim3(orthonormalize(r), t, s)

    def __matmul__(self, other):
        return self.compose(other)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64)
        a = m[:3, :3]
        s = float(np.cbrt(np.linalg.det(a)))
        if cls is PoseSE3:
            return cls(orthonormalize(a), m[:3, 3])
        return cls(orthonormalize(a / s), m[:3, 3], s)

    def to_dict(self) -> dict:
        return {"matrix": self.matrix().tolist(), "scale": self.scale}

    @classmethod
    def from_dict(cls, d: dict):
        m = np.asarray(d["matrix"], dtype=np.float64)
        s = float(d.get("scale", 1.0))
        if cls is PoseSE3:
            return cls(orthonormalize(m[:3, :3]), m[:3, 3])
        return cls(orthonormalize(m[:3, :3] / s), m[:3, 3], s)


class PoseSE3(PoseSim3):
    """x -> R x + t."""

    def __init__(self, rotation, translation):
        super().__init__(rotation, translation, 1.0)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))


def pose_error(estimate: PoseSim3, truth: PoseSim3) -> tuple[float, float, float]:
    """(relative scale error, rotation error in radians, translation error)."""
    ds = abs(estimate.scale / truth.scale - 1.0)
    dr = rotation_angle(estimate.rotation.T @ truth.rotation)
    dt = float(np.linalg.norm(estimate.translation - truth.translation))
    return ds, dr, dt
