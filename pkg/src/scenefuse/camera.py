"""Pinhole cameras (OpenCV axes: x right, y down, z forward) and ray generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .poses import PoseSim3


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    c2w: np.ndarray  # 4x4 camera-to-world, rigid
    near: float = 0.05
    far: float = 100.0

    def __post_init__(self):
        object.__setattr__(self, "c2w", np.asarray(self.c2w, dtype=np.float64).reshape(4, 4))
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise ValueError("image size must be positive")
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")

    @property
    def center(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()

    @property
    def rotation(self) -> np.ndarray:
        return self.c2w[:3, :3]

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Unit rays through every pixel center, row-major (v, u) order."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d_cam = np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones_like(u)], -1)
        d = d_cam.reshape(-1, 3) @ self.rotation.T
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        o = np.broadcast_to(self.center, d.shape).copy()
        return o, d

    def project(self, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """World points -> (u, v, z_cam); u, v in continuous pixel coordinates."""
        p = np.asarray(points, dtype=np.float64) - self.center
        pc = p @ self.rotation
        z = pc[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = self.fx * pc[..., 0] / z + self.cx
            v = self.fy * pc[..., 1] / z + self.cy
        return u, v, z

    def transformed(self, pose: PoseSim3) -> "Camera":
        """Express this camera in the frame reached by `pose` (scale applies to near/far)."""
        m = np.eye(4)
        m[:3, :3] = pose.rotation @ self.rotation
        m[:3, 3] = pose.apply(self.center)
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, m,
                      self.near * pose.scale, self.far * pose.scale)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "near": self.near, "far": self.far,
            "c2w": self.c2w.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]), np.asarray(d["c2w"], dtype=np.float64),
                   float(d["near"]), float(d["far"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world matrix for a camera at `eye` looking at `target`."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    if abs(forward @ up) > 0.999:
        up = np.array([0.0, 1.0, 0.0]) if abs(forward[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, down, forward, eye
    return m


def make_camera(eye, target, width: int, height: int, fov_deg: float,
                near: float = 0.05, far: float = 100.0) -> Camera:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    return Camera(f, f, width / 2.0, height / 2.0, width, height, look_at(eye, target), near, far)
