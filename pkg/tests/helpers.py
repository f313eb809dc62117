"""Scene builders shared by the test modules."""

import numpy as np

from voxanim.geometry import rot_x, rot_y, rotation_about
from voxanim.volume import CanonicalVolume, RenderCube, texture_to_world, voxel_centers

CUBE = RenderCube()
ACCEPTANCE: dict = {}  # criterion number -> PASS/FAIL line, printed in the session summary


def report(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
    ACCEPTANCE[n] = line
    print(line)


def world_grid(S, cube=CUBE):
    """World position of every voxel center, ``(S, S, S, 3)``."""
    c = voxel_centers(S)
    z, y, x = np.meshgrid(c, c, c, indexing="ij")
    return texture_to_world(cube, np.stack([x, y, z], axis=-1))


def blob_volume(S=16, n_parts=1, seed=0, peak=20.0, radius=0.35, cube=CUBE):
    """Smooth Gaussian density with a colour gradient and soft part logits."""
    rng = np.random.default_rng(seed)
    pts = world_grid(S, cube)
    c = cube.center + rng.uniform(-0.1, 0.1, 3)
    r2 = np.sum((pts - c) ** 2, axis=-1)
    density = peak * np.exp(-r2 / (2 * radius**2))
    rel = (pts - cube.center) / 2.0 + 0.5
    rgb = np.clip(np.stack([rel[..., 0], rel[..., 1], 1.0 - rel[..., 2]], axis=-1), 0.0, 1.0)
    if n_parts == 1:
        logits = np.zeros((S, S, S, 1))
    else:
        logits = np.stack([(k - (n_parts - 1) / 2) * 3.0 * (pts[..., 0] - cube.center[0]) for k in range(n_parts)],
                          axis=-1)
    return CanonicalVolume(density, rgb, logits, np.array([1.0, 1.0, 1.0]))


def orbit(yaw, pitch=0.0, cube=CUBE):
    return rotation_about(rot_y(yaw) @ rot_x(pitch), cube.center)
