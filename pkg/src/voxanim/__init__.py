"""Numerics for animating voxel volumes: rendering, skinning, pose recovery,
scene inversion and evaluation metrics."""

from voxanim.errors import VoxAnimError
from voxanim.geometry import PinholeCamera, RigidTransform, project
from voxanim.renderer import RenderConfig, RenderOutput, render, render_with_grad
from voxanim.volume import CanonicalVolume, RenderCube

__version__ = "0.1.0"

__all__ = [
    "CanonicalVolume",
    "PinholeCamera",
    "RenderConfig",
    "RenderCube",
    "RenderOutput",
    "RigidTransform",
    "VoxAnimError",
    "project",
    "render",
    "render_with_grad",
]
