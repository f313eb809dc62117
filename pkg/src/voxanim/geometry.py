"""Rigid transforms, the fixed pinhole camera and yaw extraction.

The camera sits at the origin with identity extrinsics and looks along +z.
Pixel ``(u, v)`` has ``u`` growing with world x and ``v`` growing with world y.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from voxanim.errors import GimbalLock, PointBehindCamera

ORTHO_TOL = 1e-9
MIN_DEPTH = 1e-9


@dataclass(frozen=True)
class RigidTransform:
    """``x -> R @ x + t``."""

    R: np.ndarray = field(default_factory=lambda: np.eye(3))
    t: np.ndarray = field(default_factory=lambda: np.zeros(3))
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if self.check:
            if np.linalg.norm(R.T @ R - np.eye(3)) >= ORTHO_TOL:
                raise ValueError("R is not orthonormal")
            if abs(np.linalg.det(R) - 1.0) > ORTHO_TOL:
                raise ValueError("R is not a proper rotation")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M) -> "RigidTransform":
        """Build from a 3x4 ``[R | t]`` (or 4x4 homogeneous) matrix."""
        M = np.asarray(M, dtype=np.float64)
        return cls(M[:3, :3], M[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the 3x4 ``[R | t]`` matrix."""
        return np.hstack([self.R, self.t[:, None]])

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return p @ self.R.T + self.t

    def __call__(self, points) -> np.ndarray:
        return self.apply(points)


def compose(a: RigidTransform, b: RigidTransform) -> RigidTransform:
    """Transform applying ``b`` first, then ``a``."""
    return RigidTransform(a.R @ b.R, a.R @ b.t + a.t, check=False)


def invert_transform(T: RigidTransform) -> RigidTransform:
    Rinv = T.R.T
    return RigidTransform(Rinv, -Rinv @ T.t, check=False)


def translation(x: float, y: float, z: float) -> RigidTransform:
    return RigidTransform(np.eye(3), np.array([x, y, z], dtype=np.float64))


def rot_x(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a: float) -> np.ndarray:
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rotation_about(R, center) -> RigidTransform:
    """Rotation ``R`` pivoting around ``center`` instead of the origin."""
    R = np.asarray(R, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    return RigidTransform(R, c - R @ c)


def rotation_log(R) -> np.ndarray:
    """Axis-angle vector of a rotation matrix."""
    R = np.asarray(R, dtype=np.float64)
    cos_a = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    angle = math.acos(cos_a)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if angle < 1e-7:
        return 0.5 * w
    if math.pi - angle < 1e-6:
        # near pi the antisymmetric part vanishes; use the symmetric part
        B = (R + np.eye(3)) / 2.0
        k = int(np.argmax(np.diag(B)))
        axis = B[:, k] / math.sqrt(B[k, k])
        if w @ axis < 0:
            axis = -axis
        return angle * axis
    return angle / (2.0 * math.sin(angle)) * w


def rotation_exp(w) -> np.ndarray:
    """Rodrigues formula, inverse of :func:`rotation_log`."""
    w = np.asarray(w, dtype=np.float64)
    angle = float(np.linalg.norm(w))
    K = np.array([[0.0, -w[2], w[1]], [w[2], 0.0, -w[0]], [-w[1], w[0], 0.0]])
    if angle < 1e-12:
        return np.eye(3) + K
    return np.eye(3) + math.sin(angle) / angle * K + (1.0 - math.cos(angle)) / angle**2 * K @ K


def rotation_angle_between(Ra, Rb) -> float:
    """Geodesic distance in radians between two rotations."""
    c = (np.trace(np.asarray(Ra).T @ np.asarray(Rb)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, c)))


@dataclass(frozen=True)
class PinholeCamera:
    """Pinhole intrinsics with ``fov`` the full vertical angle in radians."""

    fov: float = 0.175
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if not 0.0 < self.fov < math.pi:
            raise ValueError(f"fov must lie in (0, pi), got {self.fov}")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")

    @property
    def focal(self) -> float:
        return (self.height / 2.0) / math.tan(self.fov / 2.0)

    @property
    def principal_point(self) -> tuple[float, float]:
        return self.width / 2.0, self.height / 2.0

    def intrinsics(self) -> np.ndarray:
        f = self.focal
        cx, cy = self.principal_point
        return np.array([[f, 0.0, cx], [0.0, f, cy], [0.0, 0.0, 1.0]])

    def resized(self, width: int, height: int) -> "PinholeCamera":
        return PinholeCamera(self.fov, width, height)


def project(cam: PinholeCamera, points) -> np.ndarray:
    """Pixel coordinates of camera-space points, shape ``(N, 2)``."""
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    z = p[:, 2]
    if np.any(z <= MIN_DEPTH):
        raise PointBehindCamera(f"{int(np.sum(z <= MIN_DEPTH))} point(s) with z <= {MIN_DEPTH}")
    f = cam.focal
    cx, cy = cam.principal_point
    return np.stack([f * p[:, 0] / z + cx, f * p[:, 1] / z + cy], axis=1)


def pixel_rays(cam: PinholeCamera, pixels) -> np.ndarray:
    """Unit ray directions through arbitrary pixel positions, shape ``(N, 3)``."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    f = cam.focal
    cx, cy = cam.principal_point
    d = np.stack([(px[:, 0] - cx) / f, (px[:, 1] - cy) / f, np.ones(len(px))], axis=1)
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def extract_yaw(R) -> float:
    """Yaw of ``R`` under the factorization ``R = R_y @ R_x @ R_z``."""
    M = np.asarray(R, dtype=np.float64)
    # R_y R_x R_z has M[1, 2] = -sin(pitch); only cos(pitch) enters the yaw
    pitch = math.asin(max(-1.0, min(1.0, M[1, 2])))
    cp = math.cos(pitch)
    if abs(cp) <= 1e-9:
        raise GimbalLock("cos(pitch) vanishes; yaw is undefined")
    return math.atan2(M[0, 2] / cp, M[2, 2] / cp)
