"""Loss terms used when fitting a volume, with analytic gradients where they
depend on the volume parameters."""

from __future__ import annotations

import numpy as np

from voxanim.errors import IndivisibleSize, ShapeMismatch, SingularAffine
from voxanim.geometry import RigidTransform
from voxanim.skinning import PartPoseSet
from voxanim.volume import CanonicalVolume

DEFAULT_LEVELS = (1, 2, 4, 8)
BCE_CLAMP = 1e-6


def _check_same(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")


def downsample(img, factor: int) -> np.ndarray:
    """Box-filter mean over ``factor x factor`` pixel blocks."""
    x = np.asarray(img, dtype=np.float64)
    if factor < 1 or factor & (factor - 1):
        raise IndivisibleSize(f"factor must be a power of two, got {factor}")
    H, W = x.shape[:2]
    if H % factor or W % factor:
        raise IndivisibleSize(f"{H}x{W} image is not divisible by {factor}")
    if factor == 1:
        return x.copy()
    return x.reshape(H // factor, factor, W // factor, factor, *x.shape[2:]).mean(axis=(1, 3))


def _upsample(x: np.ndarray, factor: int) -> np.ndarray:
    return np.repeat(np.repeat(x, factor, axis=0), factor, axis=1)


def pyramid_reconstruction_loss(pred, target, levels=DEFAULT_LEVELS) -> float:
    return pyramid_reconstruction_loss_grad(pred, target, levels)[0]


def pyramid_reconstruction_loss_grad(pred, target, levels=DEFAULT_LEVELS):
    """Sum over pyramid levels of the mean absolute difference, and its gradient in ``pred``."""
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    _check_same(p, t)
    loss = 0.0
    grad = np.zeros_like(p)
    for f in levels:
        diff = downsample(p, f) - downsample(t, f)
        loss += float(np.abs(diff).mean())
        # sign(0) = 0 gives the zero subgradient at an exact match
        g = np.sign(diff) / diff.size
        grad += _upsample(g, f) / (f * f)
    return loss, grad


def background_loss(occupancy, mask) -> float:
    return background_loss_grad(occupancy, mask)[0]


def background_loss_grad(occupancy, mask):
    """Binary cross-entropy pushing occupancy toward ``1 - mask``; returns loss and d/d occupancy."""
    O = np.asarray(occupancy, dtype=np.float64)
    B = np.asarray(mask, dtype=np.float64)
    _check_same(O, B)
    Oc = np.clip(O, BCE_CLAMP, 1.0 - BCE_CLAMP)
    target = 1.0 - B
    loss = -np.mean(target * np.log(Oc) + B * np.log(1.0 - Oc))
    g = -(target / Oc - B / (1.0 - Oc)) / O.size
    g = np.where((O > BCE_CLAMP) & (O < 1.0 - BCE_CLAMP), g, 0.0)
    return float(loss), g


def apply_affine(A, points) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64).reshape(2, 3)
    return np.asarray(points, dtype=np.float64) @ A[:, :2].T + A[:, 2]


def equivariance_loss(k_orig, k_warped, A) -> float:
    """Mean L1 gap between affinely moved keypoints and keypoints found on the warped image."""
    ko = np.asarray(k_orig, dtype=np.float64)
    kw = np.asarray(k_warped, dtype=np.float64)
    _check_same(ko, kw)
    return float(np.abs(apply_affine(A, ko) - kw).mean())


def invert_affine(A) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64).reshape(2, 3)
    L = A[:, :2]
    if abs(np.linalg.det(L)) < 1e-12:
        raise SingularAffine("affine linear part is singular")
    Li = np.linalg.inv(L)
    return np.hstack([Li, (-Li @ A[:, 2])[:, None]])


def warp_affine(img, A) -> np.ndarray:
    """Move image content at pixel position ``x`` to ``A x`` (bilinear, zero outside).

    Positions follow the projection convention: pixel ``(i, j)`` is centered at
    ``(i + 0.5, j + 0.5)``.
    """
    src = np.asarray(img, dtype=np.float64)
    Ainv = invert_affine(A)
    H, W = src.shape[:2]
    vv, uu = np.mgrid[0:H, 0:W]
    pos = np.stack([uu.ravel() + 0.5, vv.ravel() + 0.5], axis=1)
    q = apply_affine(Ainv, pos) - 0.5
    x0 = np.floor(q[:, 0]).astype(np.int64)
    y0 = np.floor(q[:, 1]).astype(np.int64)
    fx = q[:, 0] - x0
    fy = q[:, 1] - y0
    flat = src.reshape(H * W, -1)
    out = np.zeros_like(flat)
    for dy, wy in ((0, 1.0 - fy), (1, fy)):
        for dx, wx in ((0, 1.0 - fx), (1, fx)):
            xi, yi = x0 + dx, y0 + dy
            ok = (xi >= 0) & (xi < W) & (yi >= 0) & (yi < H)
            wgt = np.where(ok, wx * wy, 0.0)
            idx = np.where(ok, yi * W + xi, 0)
            out += wgt[:, None] * np.where(ok[:, None], flat[idx], 0.0)
    return out.reshape(src.shape)


def part_mean_density(vol: CanonicalVolume) -> np.ndarray:
    """Mean over voxels of density times each part's canonical weight."""
    w = vol.part_weights()
    return (vol.density[..., None] * w).reshape(-1, vol.n_parts).mean(axis=0)


def _pose_l1(a, b) -> float:
    return float(np.abs(a.matrix() - b.matrix()).sum())


def init_loss(poses: PartPoseSet, sigma_p, t: float = 0.01) -> float:
    return init_loss_grad(poses, sigma_p, t)[0]


def init_loss_grad(poses: PartPoseSet, sigma_p, t: float = 0.01):
    """Hinge pulling low-density parts toward the densest part's pose.

    Returns the loss and its derivative w.r.t. ``sigma_p`` (the choice of the
    densest part is treated as fixed).
    """
    sig = np.asarray(sigma_p, dtype=np.float64)
    if len(poses) == 1:
        anchor = RigidTransform.identity()
    else:
        anchor = poses[int(np.argmax(sig))]
    dist = np.array([_pose_l1(p, anchor) for p in poses])
    gap = t - sig
    loss = float(np.sum(np.maximum(gap, 0.0) * dist))
    grad = np.where(gap > 0, -dist, 0.0)
    return loss, grad


def part_mean_density_grad(vol: CanonicalVolume, d_sigma_p):
    """Pull a gradient on the per-part mean densities back to the density and logit grids."""
    d = np.asarray(d_sigma_p, dtype=np.float64)
    w = vol.part_weights()
    n = vol.size**3
    g_density = (w @ d) / n
    # d/d logits of density * softmax_p, contracted with d_p
    wd = w * d
    g_logits = vol.density[..., None] * (wd - w * wd.sum(axis=-1, keepdims=True)) / n
    return g_density, g_logits


def geometry_reg_loss(vol: CanonicalVolume, vol_ref: CanonicalVolume) -> float:
    return geometry_reg_loss_grad(vol, vol_ref)[0]


def geometry_reg_loss_grad(vol: CanonicalVolume, vol_ref: CanonicalVolume):
    """Mean L1 drift of density and part logits from a reference volume."""
    _check_same(vol.density, vol_ref.density)
    _check_same(vol.lbs_logits, vol_ref.lbs_logits)
    dd = vol.density - vol_ref.density
    dl = vol.lbs_logits - vol_ref.lbs_logits
    loss = float(np.abs(dd).mean() + np.abs(dl).mean())
    return loss, np.sign(dd) / dd.size, np.sign(dl) / dl.size

