"""EPnP pose recovery from 2D-3D keypoint correspondences.

The solver returns the rigid transform carrying the 3D keypoints into the camera
frame. With the camera fixed at the identity this is directly the part pose used
by skinning; :func:`camera_pose_in_part_frame` gives the inverse (the camera as
seen from the part).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from voxanim.errors import BehindCamera, DegenerateConfiguration, InvalidStep, PointBehindCamera
from voxanim.geometry import (
    PinholeCamera,
    RigidTransform,
    invert_transform,
    project,
    rotation_log,
)

PLANAR_RATIO = 1e-9
GN_ITERS = 10


@dataclass(frozen=True)
class KeypointCorrespondence:
    k3d: np.ndarray  # (N, 3)
    k2d: np.ndarray  # (N, 2) pixels

    def __post_init__(self):
        k3d = np.asarray(self.k3d, dtype=np.float64).reshape(-1, 3)
        k2d = np.asarray(self.k2d, dtype=np.float64).reshape(-1, 2)
        if len(k3d) != len(k2d):
            raise ValueError(f"{len(k3d)} 3D points vs {len(k2d)} 2D points")
        if len(k3d) < 6:
            raise DegenerateConfiguration(f"need at least 6 correspondences, got {len(k3d)}")
        if not (np.all(np.isfinite(k3d)) and np.all(np.isfinite(k2d))):
            raise ValueError("correspondences contain non-finite values")
        object.__setattr__(self, "k3d", k3d)
        object.__setattr__(self, "k2d", k2d)

    @property
    def n(self) -> int:
        return len(self.k3d)


def keypoint_grid(center=(0.0, 0.0, 10.5), half_size: float = 0.5, n: int = 5) -> np.ndarray:
    """Regular ``n**3`` cubical grid of keypoints, shape ``(n**3, 3)``."""
    ax = np.linspace(-half_size, half_size, n)
    z, y, x = np.meshgrid(ax, ax, ax, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1) + np.asarray(center, dtype=np.float64)


def reprojection_error(corr: KeypointCorrespondence, pose: RigidTransform, cam: PinholeCamera) -> float:
    """Mean over keypoints of the L1 pixel distance to the reprojected 3D points."""
    uv = project(cam, pose.apply(corr.k3d))
    return float(np.abs(corr.k2d - uv).sum() / corr.n)


def camera_pose_in_part_frame(part_pose: RigidTransform) -> RigidTransform:
    return invert_transform(part_pose)


def _rigid_align(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares ``R, t`` with ``dst ~ R @ src + t`` (determinant corrected)."""
    cs, cd = src.mean(axis=0), dst.mean(axis=0)
    H = (src - cs).T @ (dst - cd)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return RigidTransform(R, cd - R @ cs, check=False)


def _control_points(k3d: np.ndarray) -> np.ndarray:
    c0 = k3d.mean(axis=0)
    X = k3d - c0
    vals, vecs = np.linalg.eigh(X.T @ X / len(k3d))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    if vals[0] <= 1e-18 or vals[1] <= PLANAR_RATIO * vals[0]:
        raise DegenerateConfiguration("3D keypoints are collinear or coincident")
    n_axes = 2 if vals[2] < PLANAR_RATIO * vals[0] else 3
    ctrl = [c0] + [c0 + np.sqrt(vals[k]) * vecs[:, k] for k in range(n_axes)]
    return np.array(ctrl)


def _barycentric(k3d: np.ndarray, ctrl: np.ndarray) -> np.ndarray:
    B = (ctrl[1:] - ctrl[0]).T  # (3, n_axes)
    a, *_ = np.linalg.lstsq(B, (k3d - ctrl[0]).T, rcond=None)
    return np.hstack([1.0 - a.sum(axis=0)[:, None], a.T])


def _gauss_newton(betas, kernel_diffs, rho, iters=GN_ITERS):
    """Refine ``betas`` so the control-point distances match ``rho``."""
    b = np.array(betas, dtype=np.float64)
    for _ in range(iters):
        d = np.einsum("k,kpd->pd", b, kernel_diffs)  # (pairs, 3)
        r = (d * d).sum(axis=1) - rho
        J = 2.0 * np.einsum("pd,kpd->pk", d, kernel_diffs)
        step, *_ = np.linalg.lstsq(J, -r, rcond=None)
        b += step
        if np.linalg.norm(step) <= 1e-14 * max(1.0, np.linalg.norm(b)):
            break
    return b


def _beta_candidates(kernel_diffs, rho):
    """Initial betas for the one-, two- and three-vector null-space combinations."""
    out = []
    d1 = kernel_diffs[0]
    n1 = np.linalg.norm(d1, axis=1)
    out.append(np.array([np.sqrt(rho) @ n1 / (n1 @ n1)]))

    n_pairs = len(rho)
    dots = lambda a, b: (kernel_diffs[a] * kernel_diffs[b]).sum(axis=1)
    L2 = np.stack([dots(0, 0), 2 * dots(0, 1), dots(1, 1)], axis=1)
    b, *_ = np.linalg.lstsq(L2, rho, rcond=None)
    if b[0] < 0:
        b = -b
    b1 = np.sqrt(max(b[0], 0.0))
    b2 = np.sqrt(max(abs(b[2]), 0.0)) * (1.0 if b[1] >= 0 else -1.0)
    out.append(np.array([b1, b2]))

    if n_pairs >= 6 and len(kernel_diffs) >= 3:
        L3 = np.stack([dots(0, 0), 2 * dots(0, 1), 2 * dots(0, 2), dots(1, 1), 2 * dots(1, 2), dots(2, 2)], axis=1)
        b, *_ = np.linalg.lstsq(L3, rho, rcond=None)
        if b[0] < 0:
            b = -b
        b1 = np.sqrt(max(b[0], 0.0))
        if b1 > 0:
            out.append(np.array([b1, b[1] / b1, b[2] / b1]))
    return out


def solve_epnp(corr: KeypointCorrespondence, cam: PinholeCamera, refine: bool = True) -> RigidTransform:
    """Pose ``T`` such that ``project(cam, T.apply(k3d))`` best matches ``k2d``."""
    k3d, k2d = corr.k3d, corr.k2d
    f = cam.focal
    cx, cy = cam.principal_point
    un = (k2d[:, 0] - cx) / f
    vn = (k2d[:, 1] - cy) / f

    ctrl = _control_points(k3d)
    nc = len(ctrl)
    alpha = _barycentric(k3d, ctrl)
    N = len(k3d)
    M = np.zeros((2 * N, 3 * nc))
    M[0::2, 0::3] = alpha
    M[0::2, 2::3] = -alpha * un[:, None]
    M[1::2, 1::3] = alpha
    M[1::2, 2::3] = -alpha * vn[:, None]
    _, sv, Vt = np.linalg.svd(M, full_matrices=False)
    if sv[0] <= 0 or sv[-4 if nc == 4 else -3] <= 1e-12 * sv[0]:
        raise DegenerateConfiguration("projection system is rank deficient")
    n_kernel = min(4, 3 * nc)
    kernel = Vt[::-1][:n_kernel].reshape(n_kernel, nc, 3)

    pairs = list(combinations(range(nc), 2))
    rho = np.array([np.sum((ctrl[i] - ctrl[j]) ** 2) for i, j in pairs])
    kernel_diffs = np.stack([[kv[i] - kv[j] for i, j in pairs] for kv in kernel])  # (K, pairs, 3)

    best, best_err = None, np.inf
    # with at least as many distance constraints as kernel vectors, every candidate is
    # refined over the full kernel so they settle on the same minimizer; this keeps the
    # solution a smooth function of k2d instead of switching between candidates
    full = refine and len(rho) >= n_kernel
    for betas in _beta_candidates(kernel_diffs, rho):
        if full:
            betas = _gauss_newton(np.pad(betas, (0, n_kernel - len(betas))), kernel_diffs, rho)
        elif refine:
            betas = _gauss_newton(betas, kernel_diffs[: len(betas)], rho)
        ctrl_cam = np.einsum("k,kcd->cd", betas, kernel[: len(betas)])
        pts_cam = alpha @ ctrl_cam
        if pts_cam[:, 2].mean() < 0:
            ctrl_cam = -ctrl_cam
            pts_cam = -pts_cam
        if pts_cam[:, 2].mean() <= 0:
            continue
        pose = _rigid_align(ctrl, ctrl_cam)
        try:
            err = reprojection_error(corr, pose, cam)
        except PointBehindCamera:
            continue
        if err < best_err:
            best, best_err = pose, err
    if best is None:
        raise BehindCamera("no candidate places the keypoints in front of the camera")
    return best


def pose_vector(T: RigidTransform, ref: RigidTransform | None = None) -> np.ndarray:
    """Axis-angle (relative to ``ref`` if given) followed by translation."""
    R = T.R if ref is None else T.R @ ref.R.T
    return np.concatenate([rotation_log(R), T.t])


def pose_jacobian_fd(corr: KeypointCorrespondence, cam: PinholeCamera, eps: float = 1e-3,
                     workers: int = 1) -> np.ndarray:
    """Central-difference sensitivity of the solved pose to each 2D coordinate.

    Returns a ``(6, 2N)`` array; column ``2i + c`` is the derivative with respect
    to coordinate ``c`` of keypoint ``i``. Rotation rows are tangent-space
    (axis-angle of ``R(k2d + e) @ R(k2d).T``).
    """
    if not eps > 0:
        raise InvalidStep(f"finite-difference step must be positive, got {eps}")
    base = solve_epnp(corr, cam)
    n = 2 * corr.n

    def column(j):
        i, c = divmod(j, 2)
        vals = []
        for sgn in (1.0, -1.0):
            k2d = corr.k2d.copy()
            k2d[i, c] += sgn * eps
            vals.append(pose_vector(solve_epnp(KeypointCorrespondence(corr.k3d, k2d), cam), base))
        return (vals[0] - vals[1]) / (2.0 * eps)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cols = list(pool.map(column, range(n)))
    else:
        cols = [column(j) for j in range(n)]
    return np.stack(cols, axis=1)
