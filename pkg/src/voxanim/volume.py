"""Voxel storage for the canonical object and trilinear lookups.

Grids are numpy arrays laid out ``[z, y, x, channel]`` with shape ``(S, S, S, C)``.
Texture coordinates are ordered ``(x, y, z)`` and span ``[-1, 1]``; voxel ``k``
along an axis has its center at ``-1 + (2k + 1) / S``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_SIZE = 64
BG_DENSITY = 1e4
_EDGE_TOL = 1e-9  # grid units; absorbs rounding at the outermost voxel centers


@dataclass(frozen=True)
class RenderCube:
    """Axis-aligned world region in which rays are sampled."""

    lo: tuple = (-1.0088, -1.0088, 9.5)
    hi: tuple = (1.0088, 1.0088, 11.5)
    texture_scale: float = 1.075

    def __post_init__(self):
        lo = tuple(float(v) for v in self.lo)
        hi = tuple(float(v) for v in self.hi)
        if any(a >= b for a, b in zip(lo, hi)):
            raise ValueError(f"cube bounds must satisfy min < max, got {lo}, {hi}")
        if not self.texture_scale > 0:
            raise ValueError("texture_scale must be positive")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @classmethod
    def cats(cls) -> "RenderCube":
        return cls(texture_scale=1.2)

    @property
    def center(self) -> np.ndarray:
        return (np.array(self.lo) + np.array(self.hi)) / 2.0

    @property
    def half_extent(self) -> np.ndarray:
        """Half size of the region covered by the texture (cube scaled up)."""
        return (np.array(self.hi) - np.array(self.lo)) / 2.0 * self.texture_scale

    def contains(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= np.array(self.lo)) & (p <= np.array(self.hi)), axis=-1)


def world_to_texture(cube: RenderCube, p) -> np.ndarray:
    return (np.asarray(p, dtype=np.float64) - cube.center) / cube.half_extent


def texture_to_world(cube: RenderCube, u) -> np.ndarray:
    return np.asarray(u, dtype=np.float64) * cube.half_extent + cube.center


def voxel_centers(size: int) -> np.ndarray:
    """Texture coordinate of each voxel center along one axis."""
    return -1.0 + (2.0 * np.arange(size) + 1.0) / size


def _as_grid(grid) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    return g[..., None] if g.ndim == 3 else g


def in_volume(size: int, p_tex) -> np.ndarray:
    """True where every coordinate lies within the outermost voxel centers."""
    g = (np.asarray(p_tex, dtype=np.float64) + 1.0) * (size / 2.0) - 0.5
    return np.all((g >= -_EDGE_TOL) & (g <= size - 1 + _EDGE_TOL), axis=-1)


@dataclass
class TrilinearStencil:
    """Corner indices and weights for a batch of trilinear lookups.

    ``flat`` holds ``(N, 8)`` flat voxel indices and ``w`` the matching weights;
    rows for queries outside the volume carry zero weights. ``dw`` holds the
    derivative of each weight with respect to the texture coordinate,
    shape ``(N, 8, 3)``.
    """

    flat: np.ndarray
    w: np.ndarray
    inside: np.ndarray
    dw: np.ndarray | None = None

    def gather(self, grid_flat: np.ndarray) -> np.ndarray:
        """Interpolated values, ``(N, C)``, from a ``(S**3, C)`` grid."""
        return np.einsum("nk,nkc->nc", self.w, grid_flat[self.flat])

    def gather_grad(self, grid_flat: np.ndarray) -> np.ndarray:
        """Spatial gradient in texture units, ``(N, C, 3)``."""
        return np.einsum("nkd,nkc->ncd", self.dw, grid_flat[self.flat])

    def scatter(self, values: np.ndarray, n_voxels: int) -> np.ndarray:
        """Adjoint of :meth:`gather`: accumulate ``(N, C)`` values onto the grid."""
        values = np.asarray(values, dtype=np.float64)
        C = values.shape[1]
        out = np.empty((n_voxels, C))
        idx = self.flat.ravel()
        for c in range(C):
            contrib = (self.w * values[:, c : c + 1]).ravel()
            out[:, c] = np.bincount(idx, weights=contrib, minlength=n_voxels)
        return out


def trilinear_stencil(size: int, p_tex, with_grad: bool = False) -> TrilinearStencil:
    p = np.atleast_2d(np.asarray(p_tex, dtype=np.float64))
    g = (p + 1.0) * (size / 2.0) - 0.5  # continuous voxel index, (x, y, z)
    inside = np.all((g >= -_EDGE_TOL) & (g <= size - 1 + _EDGE_TOL), axis=1)
    g = np.where(inside[:, None], np.clip(g, 0.0, size - 1), 0.0)
    i0 = np.minimum(g.astype(np.int64), max(size - 2, 0))
    f = g - i0  # may reach 1.0 on the last voxel
    base = (i0[:, 2] * size + i0[:, 1]) * size + i0[:, 0]
    offs = np.array([(dz * size + dy) * size + dx for dz in (0, 1) for dy in (0, 1) for dx in (0, 1)])
    flat = base[:, None] + offs
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    wx = np.stack([1.0 - fx, fx], axis=1)
    wy = np.stack([1.0 - fy, fy], axis=1)
    wz = np.stack([1.0 - fz, fz], axis=1) * inside[:, None]
    wzy = (wz[:, :, None] * wy[:, None, :]).reshape(-1, 4)
    w = (wzy[:, :, None] * wx[:, None, :]).reshape(-1, 8)
    dw = None
    if with_grad:
        # derivative of each corner weight along x, y, z in texture units
        sx = np.array([-1.0, 1.0])
        k = size / 2.0
        dx = (wzy[:, :, None] * sx[None, None, :]).reshape(-1, 8)
        dy = ((wz[:, :, None] * sx[None, None, :]).reshape(-1, 4)[:, :, None] * wx[:, None, :]).reshape(-1, 8)
        wyx = (wy[:, :, None] * wx[:, None, :]).reshape(-1, 4)
        dz = ((sx[None, :, None] * inside[:, None, None]) * wyx[:, None, :]).reshape(-1, 8)
        dw = np.stack([dx, dy, dz], axis=2) * k
    return TrilinearStencil(flat=flat, w=w, inside=inside, dw=dw)


def sample_trilinear(grid, p_tex) -> np.ndarray:
    """Trilinearly interpolate ``grid`` at texture coordinates.

    Accepts a single 3-vector (returns a ``C``-vector) or an ``(N, 3)`` batch
    (returns ``(N, C)``). Queries outside the outermost voxel centers give zeros.
    """
    g = _as_grid(grid)
    S, C = g.shape[0], g.shape[-1]
    p = np.asarray(p_tex, dtype=np.float64)
    st = trilinear_stencil(S, p)
    out = st.gather(g.reshape(S**3, C))
    return out[0] if p.ndim == 1 else out


def softmax(x, axis=-1) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


@dataclass
class CanonicalVolume:
    """Density, color and part-assignment grids of the object in canonical pose.

    ``density`` is ``(S, S, S)`` and already activated (non-negative), ``rgb`` is
    ``(S, S, S, 3)`` in ``[0, 1]`` and ``lbs_logits`` is ``(S, S, S, N_p)``.
    """

    density: np.ndarray
    rgb: np.ndarray
    lbs_logits: np.ndarray
    bg_color: np.ndarray = field(default_factory=lambda: np.ones(3))
    bg_density: float = BG_DENSITY

    def __post_init__(self):
        self.density = np.asarray(self.density, dtype=np.float64)
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.lbs_logits = np.asarray(self.lbs_logits, dtype=np.float64)
        self.bg_color = np.asarray(self.bg_color, dtype=np.float64).reshape(3)
        S = self.density.shape[0]
        if self.density.shape != (S, S, S):
            raise ValueError(f"density must be (S, S, S), got {self.density.shape}")
        if self.rgb.shape != (S, S, S, 3):
            raise ValueError(f"rgb must be {(S, S, S, 3)}, got {self.rgb.shape}")
        if self.lbs_logits.ndim != 4 or self.lbs_logits.shape[:3] != (S, S, S):
            raise ValueError(f"lbs_logits must be (S, S, S, N_p), got {self.lbs_logits.shape}")
        if self.lbs_logits.shape[3] < 1:
            raise ValueError("need at least one part")
        for name in ("density", "rgb", "lbs_logits"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} contains non-finite values")
        if np.any(self.density < 0):
            raise ValueError("density must be non-negative")
        if not self.bg_density > 0:
            raise ValueError("bg_density must be positive")

    @property
    def size(self) -> int:
        return self.density.shape[0]

    @property
    def n_parts(self) -> int:
        return self.lbs_logits.shape[3]

    @classmethod
    def empty(cls, size: int = DEFAULT_SIZE, n_parts: int = 1, **kw) -> "CanonicalVolume":
        return cls(
            np.zeros((size,) * 3),
            np.zeros((size,) * 3 + (3,)),
            np.zeros((size,) * 3 + (n_parts,)),
            **kw,
        )

    def copy(self) -> "CanonicalVolume":
        return CanonicalVolume(
            self.density.copy(), self.rgb.copy(), self.lbs_logits.copy(),
            self.bg_color.copy(), self.bg_density,
        )

    def part_weights(self) -> np.ndarray:
        """Per-voxel softmax of the LBS logits, ``(S, S, S, N_p)``."""
        return softmax(self.lbs_logits, axis=-1)


def lbs_weights_canonical(vol: CanonicalVolume, x_c_tex) -> np.ndarray:
    """Canonical skinning weights: softmax of the trilinearly sampled logits.

    Outside the volume the sampled logits are zero, giving the uniform simplex.
    """
    return softmax(sample_trilinear(vol.lbs_logits, x_c_tex), axis=-1)
