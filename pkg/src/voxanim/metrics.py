"""Evaluation metrics and inference-time helpers.

Yaw/shape/pose consistency scores consume angles and codes produced by external
estimators; here they are plain arrays.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from voxanim.errors import (
    DegenerateConfiguration,
    DegenerateDistance,
    DegenerateVariance,
    KeypointOutOfBounds,
    NonFiniteDepth,
    ShapeMismatch,
)
from voxanim.geometry import PinholeCamera, RigidTransform, project, rot_y, rotation_about
from voxanim.volume import RenderCube

CROSS_OFFSET = 0.05


def pearson(a, b, mask=None) -> float:
    """Sample Pearson correlation over the entries where ``mask`` is true."""
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    if mask is not None:
        m = np.asarray(mask, dtype=bool).ravel()
        if m.shape != x.shape:
            raise ShapeMismatch(f"mask {m.shape} vs data {x.shape}")
        x, y = x[m], y[m]
    if len(x) < 2:
        raise DegenerateVariance("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(dx @ dx)
    sy = math.sqrt(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        raise DegenerateVariance("one of the inputs is constant")
    return float(np.clip((dx @ dy) / (sx * sy), -1.0, 1.0))


def wrap_angle(x):
    """Wrap to ``(-pi, pi]``."""
    w = np.mod(np.asarray(x, dtype=np.float64) + math.pi, 2.0 * math.pi) - math.pi
    return np.where(w == -math.pi, math.pi, w)


def ayd(theta_d, theta_r, theta_c):
    """Yaw deviation ``|theta_d - (theta_c + theta_r)|`` with the difference wrapped."""
    return np.abs(wrap_angle(np.asarray(theta_d) - (np.asarray(theta_c) + np.asarray(theta_r))))


def _code_l1(a, b) -> float:
    x = np.asarray(a, dtype=np.float64).ravel()
    y = np.asarray(b, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatch(f"code lengths differ: {len(x)} vs {len(y)}")
    if len(x) < 1:
        raise ShapeMismatch("empty code")
    return float(np.abs(x - y).sum() / len(x))


def asc(c_s, c_r) -> float:
    """Shape-code consistency between source and rendered frames."""
    return _code_l1(c_s, c_r)


def apc(c_d, c_r) -> float:
    """Pose-code consistency between driving and rendered frames."""
    return _code_l1(c_d, c_r)


def depth_affine_alignment(d, d_hat) -> tuple[float, float]:
    """Closed-form ``(scale, shift)`` with ``d ~ scale * d_hat + shift``."""
    x = np.asarray(d_hat, dtype=np.float64).ravel()
    y = np.asarray(d, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ShapeMismatch(f"{y.shape} vs {x.shape}")
    mx, my = x.mean(), y.mean()
    var = np.mean((x - mx) ** 2)
    if var <= 1e-12:
        raise DegenerateVariance("reference depth is (nearly) constant")
    scale = float(np.mean((x - mx) * (y - my)) / var)
    return scale, float(my - scale * mx)


def fit_affine_2d(src, dst) -> np.ndarray:
    """Least-squares ``2x3`` affine mapping ``src`` points onto ``dst``."""
    s = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    d = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    if s.shape != d.shape:
        raise ShapeMismatch(f"{s.shape} vs {d.shape}")
    if len(s) < 3:
        raise DegenerateConfiguration("need at least three points")
    X = np.hstack([s, np.ones((len(s), 1))])
    if np.linalg.matrix_rank(X, tol=1e-9 * max(1.0, np.abs(s).max())) < 3:
        raise DegenerateConfiguration("source points are collinear")
    sol, *_ = np.linalg.lstsq(X, d, rcond=None)
    return sol.T


def _bilinear(img: np.ndarray, u: float, v: float) -> float:
    H, W = img.shape
    x = min(max(u - 0.5, 0.0), W - 1.0)
    y = min(max(v - 0.5, 0.0), H - 1.0)
    x0, y0 = min(int(x), max(W - 2, 0)), min(int(y), max(H - 2, 0))
    fx, fy = x - x0, y - y0
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    return float((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
                 + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def unproject(cam: PinholeCamera, pixels, z_depth) -> np.ndarray:
    """Camera-space points on the pixel rays at the given z-depths."""
    px = np.atleast_2d(np.asarray(pixels, dtype=np.float64))
    z = np.asarray(z_depth, dtype=np.float64).reshape(-1)
    f = cam.focal
    cx, cy = cam.principal_point
    return np.stack([(px[:, 0] - cx) / f * z, (px[:, 1] - cy) / f * z, z], axis=1)


def cross_points(center, width: int, height: int, offset: float = CROSS_OFFSET) -> np.ndarray:
    """Center plus four points at ``offset`` (image fraction) along each axis."""
    c = np.asarray(center, dtype=np.float64)
    dx, dy = offset * width, offset * height
    return np.array([c, c + (dx, 0), c - (dx, 0), c + (0, dy), c - (0, dy)])


def lift_keypoints_novel_view(centers, depth, cam: PinholeCamera, yaw: float,
                              cube: RenderCube | None = None) -> np.ndarray:
    """Affine transforms moving each keypoint neighbourhood into a yawed view.

    ``depth`` holds per-pixel z-depth. Each center's cross is lifted to 3D,
    rotated about the rendering-cube center by ``yaw`` around the y axis,
    reprojected, and an affine is fitted from the original to the moved points.
    Returns ``(M, 2, 3)``.
    """
    cube = cube or RenderCube()
    D = np.asarray(depth, dtype=np.float64)
    H, W = D.shape
    spin = rotation_about(rot_y(yaw), cube.center)
    out = []
    for c in np.atleast_2d(np.asarray(centers, dtype=np.float64)):
        pts = cross_points(c, W, H)
        if np.any(pts < 0) or np.any(pts[:, 0] > W) or np.any(pts[:, 1] > H):
            raise KeypointOutOfBounds(f"cross around {tuple(c)} leaves the {W}x{H} image")
        z = np.array([_bilinear(D, u, v) for u, v in pts])
        if not np.all(np.isfinite(z)) or np.any(z <= 0):
            raise NonFiniteDepth(f"invalid depth near keypoint {tuple(c)}")
        moved = project(cam, spin.apply(unproject(cam, pts, z)))
        out.append(fit_affine_2d(pts, moved))
    return np.array(out)


def filter_part_distances(seq: Sequence[Sequence[RigidTransform]], cube: RenderCube | None = None):
    """Give every part a constant camera distance across frames.

    For each part the transformed cube center is slid along its viewing ray so
    its distance from the camera equals that part's mean distance; rotations are
    kept.
    """
    cube = cube or RenderCube()
    frames = [list(f) for f in seq]
    if not frames:
        return []
    P = len(frames[0])
    if any(len(f) != P for f in frames):
        raise ValueError("all frames must have the same number of parts")
    c0 = cube.center
    out = [list(f) for f in frames]
    for p in range(P):
        centers = np.array([f[p].R @ c0 + f[p].t for f in frames])
        dist = np.linalg.norm(centers, axis=1)
        if np.any(dist <= 1e-9):
            raise DegenerateDistance(f"part {p}: cube center maps onto the camera origin")
        if np.all(dist == dist[0]):
            continue
        target = dist.mean()
        for k, f in enumerate(frames):
            moved = centers[k] * (target / dist[k])
            out[k][p] = RigidTransform(f[p].R, moved - f[p].R @ c0, check=False)
    return out
