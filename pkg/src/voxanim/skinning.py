"""Linear blend skinning and its approximate inverse.

Part poses map canonical points into the deformed (camera) frame. Going back,
each deformed point is pulled through every part's inverse pose and the parts
vote with their canonical weights at the landing spot.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from voxanim.geometry import RigidTransform
from voxanim.volume import (
    CanonicalVolume,
    RenderCube,
    TrilinearStencil,
    in_volume,
    softmax,
    trilinear_stencil,
    world_to_texture,
)

EMPTY_EPS = 1e-8

PartPoseSet = Sequence[RigidTransform]


def stack_poses(poses: PartPoseSet) -> tuple[np.ndarray, np.ndarray]:
    """Rotations ``(P, 3, 3)`` and translations ``(P, 3)``."""
    R = np.stack([p.R for p in poses])
    t = np.stack([p.t for p in poses])
    return R, t


def lbs_forward(x_c, weights, poses: PartPoseSet) -> np.ndarray:
    """Deformed position of canonical point(s) ``x_c`` under blended part poses."""
    x = np.asarray(x_c, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    R, t = stack_poses(poses)
    moved = np.einsum("pij,...j->...pi", R, x) + t  # (..., P, 3)
    return np.einsum("...p,...pi->...i", w, moved)


def back_project(x_d, poses: PartPoseSet) -> np.ndarray:
    """``R_p^T (x_d - t_p)`` for every part, shape ``(..., P, 3)``."""
    x = np.asarray(x_d, dtype=np.float64)
    R, t = stack_poses(poses)
    return np.einsum("pji,...pj->...pi", R, x[..., None, :] - t)


@dataclass
class InverseSkin:
    """Batched inverse-skinning result with the intermediates needed for gradients.

    Shapes: ``y`` (N, P, 3) back-projected points, ``soft`` (N, P, P) softmax of the
    logits sampled at each back-projection, ``mask`` (N, P) in-volume flags,
    ``denom`` (N,), ``weights`` (N, P) normalized inverse weights (zero rows where
    ``empty``), ``x_c`` (N, 3) canonical positions.
    """

    y: np.ndarray
    soft: np.ndarray
    mask: np.ndarray
    denom: np.ndarray
    weights: np.ndarray
    empty: np.ndarray
    x_c: np.ndarray
    stencils: list[TrilinearStencil]


def inverse_skin(x_d, poses: PartPoseSet, vol: CanonicalVolume, cube: RenderCube) -> InverseSkin:
    """Vectorized inverse LBS for ``(N, 3)`` deformed points."""
    x = np.atleast_2d(np.asarray(x_d, dtype=np.float64))
    N, P = len(x), vol.n_parts
    if len(poses) != P:
        raise ValueError(f"{len(poses)} poses for a volume with {P} parts")
    S = vol.size
    logits = vol.lbs_logits.reshape(S**3, P)
    y = back_project(x, poses)
    if P == 1:
        inside = in_volume(S, world_to_texture(cube, y[:, 0]))
        soft = np.ones((N, 1, 1))
        mask = inside[:, None]
        weights = mask.astype(np.float64)
        return InverseSkin(y, soft, mask, weights[:, 0].copy(), weights, ~inside, y[:, 0] * weights, [])
    soft = np.empty((N, P, P))
    mask = np.empty((N, P), dtype=bool)
    stencils = []
    for p in range(P):
        st = trilinear_stencil(S, world_to_texture(cube, y[:, p]))
        soft[:, p] = softmax(st.gather(logits), axis=-1)
        mask[:, p] = st.inside
        stencils.append(st)
    own = np.einsum("npp->np", soft) * mask
    denom = own.sum(axis=1)
    empty = denom < EMPTY_EPS
    weights = np.where(empty[:, None], 0.0, own / np.where(empty, 1.0, denom)[:, None])
    x_c = np.einsum("np,npi->ni", weights, y)
    return InverseSkin(y, soft, mask, denom, weights, empty, x_c, stencils)


def inverse_lbs_weights(x_d, poses: PartPoseSet, vol: CanonicalVolume, cube: RenderCube):
    """Inverse skinning weights at a single deformed point, or ``None`` when empty."""
    res = inverse_skin(np.asarray(x_d, dtype=np.float64)[None], poses, vol, cube)
    return None if res.empty[0] else res.weights[0]


def deform_to_canonical(x_d, poses: PartPoseSet, vol: CanonicalVolume, cube: RenderCube):
    """Canonical position for a single deformed point, or ``None`` when empty."""
    res = inverse_skin(np.asarray(x_d, dtype=np.float64)[None], poses, vol, cube)
    return None if res.empty[0] else res.x_c[0]
