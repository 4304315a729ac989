"""Pinhole cameras and rigid poses.

Conventions: poses map world to camera, the camera looks along +z, image
origin is top-left with +y pointing down, and pixel centers sit at integer
coordinates. World "up" is -y so that an identity pose is a level camera.
Depth always means the camera-frame z coordinate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

ORTHO_TOL = 1e-6


class BehindCameraError(ValueError):
    pass


class InvalidDepthError(ValueError):
    pass


def _as_rotation(rotation) -> np.ndarray:
    R = np.array(rotation, dtype=np.float64).reshape(3, 3)
    if not np.allclose(R @ R.T, np.eye(3), atol=ORTHO_TOL, rtol=0):
        raise ValueError("rotation is not orthonormal")
    if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
        raise ValueError("rotation must have determinant +1")
    R.setflags(write=False)
    return R


@dataclass(frozen=True, eq=False)
class RigidTransform:
    """x -> R x + t."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", _as_rotation(self.rotation))
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        t.setflags(write=False)
        object.__setattr__(self, "translation", t)

    def apply(self, points) -> np.ndarray:
        """Transform one point (3,) or a batch (..., 3)."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.rotation.T + self.translation

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return self ∘ other, i.e. apply ``other`` first."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        Rt = self.rotation.T
        return RigidTransform(Rt, -Rt @ self.translation)

    @staticmethod
    def identity() -> "RigidTransform":
        return RigidTransform(np.eye(3), np.zeros(3))


@dataclass(frozen=True, eq=False)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: RigidTransform = field(default_factory=RigidTransform.identity)

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError(f"image size must be at least 1x1, got {self.width}x{self.height}")
        object.__setattr__(self, "fx", float(self.fx))
        object.__setattr__(self, "fy", float(self.fy))
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def R(self) -> np.ndarray:
        return self.pose.rotation

    @property
    def t(self) -> np.ndarray:
        return self.pose.translation

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.R.T @ self.t

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    def with_pose(self, pose: RigidTransform) -> "Camera":
        return Camera(self.fx, self.fy, self.cx, self.cy, self.width, self.height, pose)

    def world_to_camera(self, points) -> np.ndarray:
        return self.pose.apply(points)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
            "R": [float(v) for v in self.R.reshape(-1)],
            "t": [float(v) for v in self.t],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        pose = RigidTransform(np.asarray(d["R"], dtype=np.float64).reshape(3, 3), d["t"])
        return cls(d["fx"], d["fy"], d["cx"], d["cy"], d["width"], d["height"], pose)


def project(point, cam: Camera) -> tuple[np.ndarray, float]:
    """Project a world point to (pixel, depth)."""
    x, y, z = cam.world_to_camera(np.asarray(point, dtype=np.float64).reshape(3))
    if z <= 1e-8:
        raise BehindCameraError(f"point is behind the camera (z={z:.3g})")
    return np.array([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy]), float(z)


def project_points(points, cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized ``project`` for (..., 3) arrays; no behind-camera check."""
    pc = cam.world_to_camera(points)
    z = pc[..., 2]
    uv = np.stack([cam.fx * pc[..., 0] / z + cam.cx, cam.fy * pc[..., 1] / z + cam.cy], axis=-1)
    return uv, z


def unproject(pixel, depth: float, cam: Camera) -> np.ndarray:
    """Lift a pixel with camera-frame depth back to a world point."""
    if not depth > 0:
        raise InvalidDepthError(f"depth must be positive, got {depth}")
    u, v = np.asarray(pixel, dtype=np.float64).reshape(2)
    pc = np.array([(u - cam.cx) / cam.fx * depth, (v - cam.cy) / cam.fy * depth, depth])
    return cam.R.T @ (pc - cam.t)


def unproject_points(pixels, depths, cam: Camera) -> np.ndarray:
    """Vectorized ``unproject``; callers are responsible for depth validity."""
    pix = np.asarray(pixels, dtype=np.float64)
    d = np.asarray(depths, dtype=np.float64)
    pc = np.stack(
        [(pix[..., 0] - cam.cx) / cam.fx * d, (pix[..., 1] - cam.cy) / cam.fy * d, d], axis=-1
    )
    return (pc - cam.t) @ cam.R


def look_at(eye, target, down=(0.0, 1.0, 0.0)) -> RigidTransform:
    """World-to-camera pose for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    n = np.linalg.norm(x)
    if n < 1e-12:
        raise ValueError("viewing direction is parallel to the down vector")
    x /= n
    y = np.cross(z, x)
    R = np.stack([x, y, z])
    return RigidTransform(R, -R @ eye)


@dataclass(frozen=True, eq=False)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    @classmethod
    def from_fov(cls, width: int, height: int, fov_deg: float) -> "Intrinsics":
        f = 0.5 * width / np.tan(np.deg2rad(fov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def orbit_cameras(n: int, radius: float, target=(0.0, 0.0, 0.0), intrinsics: Intrinsics | None = None,
                  start_deg: float = 0.0) -> list[Camera]:
    """Cameras evenly spaced in azimuth on a horizontal circle around ``target``.

    Azimuth 0 puts the camera on the -z side of the target.
    """
    if n < 1:
        raise ValueError("need at least one camera")
    if not radius > 0:
        raise ValueError("radius must be positive")
    if intrinsics is None:
        intrinsics = Intrinsics.from_fov(64, 64, 40.0)
    target = np.asarray(target, dtype=np.float64)
    cams = []
    for k in range(n):
        a = np.deg2rad(start_deg + 360.0 * k / n)
        eye = target + radius * np.array([np.sin(a), 0.0, -np.cos(a)])
        pose = look_at(eye, target)
        cams.append(Camera(intrinsics.fx, intrinsics.fy, intrinsics.cx, intrinsics.cy,
                           intrinsics.width, intrinsics.height, pose))
    return cams


def save_cameras(path, cams) -> None:
    Path(path).write_text(json.dumps([c.to_dict() for c in cams], indent=1))


def load_cameras(path) -> list[Camera]:
    return [Camera.from_dict(d) for d in json.loads(Path(path).read_text())]
