"""Volumetric rendering of a skinned voxel volume from the fixed camera.

Rays are split into fixed-size chunks; chunks may run on a thread pool, and the
chunk layout never depends on the worker count, so outputs (and gradient
reductions built on them) are bit-identical for any number of workers.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from voxanim.errors import InconsistentParts
from voxanim.geometry import PinholeCamera, RigidTransform
from voxanim.skinning import PartPoseSet, inverse_skin, stack_poses
from voxanim.volume import (
    CanonicalVolume,
    RenderCube,
    trilinear_stencil,
    world_to_texture,
)

CHUNK_RAYS = 2048


@dataclass(frozen=True)
class RenderConfig:
    n_samples: int = 128
    jitter: bool = False
    density_noise_sigma: float = 0.0
    include_background: bool = True
    seed: int = 0
    workers: int = 1
    with_normals: bool = True

    def __post_init__(self):
        if self.n_samples < 2:
            raise ValueError("n_samples must be >= 2")
        if self.density_noise_sigma < 0:
            raise ValueError("density_noise_sigma must be >= 0")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")

    @classmethod
    def g_phase(cls, **kw) -> "RenderConfig":
        """Single-part preset with the reduced sample count."""
        kw.setdefault("n_samples", 48)
        return cls(**kw)

    @classmethod
    def training(cls, **kw) -> "RenderConfig":
        """Stochastic preset: jittered samples and density noise at full strength."""
        kw.setdefault("jitter", True)
        kw.setdefault("density_noise_sigma", 0.5)
        return cls(**kw)


def density_noise_schedule(step: int, start: float = 0.5, end_step: int = 100_000) -> float:
    """Linearly decayed density-noise standard deviation, zero from ``end_step`` on."""
    if step >= end_step:
        return 0.0
    return start * (1.0 - step / end_step)


@dataclass
class RenderOutput:
    rgb: np.ndarray  # (H, W, 3)
    depth: np.ndarray  # (H, W)
    occupancy: np.ndarray  # (H, W)
    normals: np.ndarray  # (H, W, 3)
    parts: np.ndarray  # (H, W, P)
    transmittance: np.ndarray  # (H, W) light reaching the far end of the cube


# --- rays -----------------------------------------------------------------

def make_rays(cam: PinholeCamera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions, each ``(H, W, 3)``; row ``v``, column ``u``."""
    u = np.arange(cam.width) + 0.5
    v = np.arange(cam.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    f = cam.focal
    cx, cy = cam.principal_point
    d = np.stack([(uu - cx) / f, (vv - cy) / f, np.ones_like(uu)], axis=-1)
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    return np.zeros_like(d), d


def ray_cube_intersect_batch(origins, dirs, cube: RenderCube):
    """Slab test for ``(N, 3)`` rays. Returns ``t_near, t_far, hit``."""
    o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    lo, hi = np.array(cube.lo), np.array(cube.hi)
    parallel = d == 0.0
    safe = np.where(parallel, 1.0, d)
    t1 = (lo - o) / safe
    t2 = (hi - o) / safe
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # a ray parallel to a slab is unconstrained by it if it starts inside
    within = (o >= lo) & (o <= hi)
    tmin = np.where(parallel, np.where(within, -np.inf, np.inf), tmin)
    tmax = np.where(parallel, np.where(within, np.inf, -np.inf), tmax)
    tn = np.maximum(tmin.max(axis=1), 0.0)
    tf = tmax.min(axis=1)
    hit = tf >= tn
    return np.where(hit, tn, 0.0), np.where(hit, tf, 0.0), hit


def ray_cube_intersect(origin, direction, cube: RenderCube):
    """``(t_near, t_far)`` clipped to ``t >= 0``, or ``None`` on a miss."""
    tn, tf, hit = ray_cube_intersect_batch(origin, direction, cube)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


# --- counter-based randomness -----------------------------------------------

_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK
    return x ^ (x >> np.uint64(31))


def hashed_uniform(seed: int, stream: int, counter: np.ndarray) -> np.ndarray:
    """Uniform floats in ``(0, 1)`` determined by ``(seed, stream, counter)`` only."""
    key = _splitmix64(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    key = _splitmix64(key ^ np.uint64(stream & 0xFFFFFFFFFFFFFFFF))
    with np.errstate(over="ignore"):
        h = _splitmix64(np.asarray(counter, dtype=np.uint64) ^ key)
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def hashed_normal(seed: int, stream: int, counter: np.ndarray) -> np.ndarray:
    c = np.asarray(counter, dtype=np.uint64)
    u1 = hashed_uniform(seed, stream, c * np.uint64(2))
    u2 = hashed_uniform(seed, stream, c * np.uint64(2) + np.uint64(1))
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


_JITTER_STREAM = 1
_NOISE_STREAM = 2


# --- forward / backward over a chunk of rays -----------------------------------

@dataclass
class _Chunk:
    """Per-sample intermediates kept for the backward pass (shapes ``(R, n, ...)``)."""

    delta: np.ndarray  # (R,)
    t: np.ndarray  # (R, n)
    sigma: np.ndarray
    active: np.ndarray  # density gradient passes (inside, non-empty, unclamped)
    color: np.ndarray  # (R, n, 3)
    weights: np.ndarray  # (R, n)
    trans: np.ndarray  # (R, n) transmittance before each sample
    t_final: np.ndarray  # (R,)
    hit: np.ndarray
    skin: object
    stencil: object


class _Scene:
    """Flattened grids and per-render constants shared by all chunks."""

    def __init__(self, vol: CanonicalVolume, poses: PartPoseSet, cube: RenderCube, cfg: RenderConfig,
                 bypass_skinning: bool | None = None):
        if len(poses) != vol.n_parts:
            raise InconsistentParts(f"{len(poses)} poses for {vol.n_parts} parts")
        S = vol.size
        self.vol, self.poses, self.cube, self.cfg = vol, list(poses), cube, cfg
        self.S = S
        self.density = vol.density.reshape(S**3, 1)
        self.rgb = vol.rgb.reshape(S**3, 3)
        self.fields = np.concatenate([self.density, self.rgb], axis=1)  # one gather for both
        self.R, _ = stack_poses(poses)
        auto = vol.n_parts == 1 and _is_identity(poses[0])
        if bypass_skinning and not auto:
            raise ValueError("skinning can only be bypassed for a single identity pose")
        self.bypass = auto if bypass_skinning is None else bypass_skinning
        self._normal_grid = None

    @property
    def normal_grid(self) -> np.ndarray:
        if self._normal_grid is None:
            # central differences per voxel; grid axes are (z, y, x)
            spacing = 2.0 / self.S
            gz, gy, gx = np.gradient(self.vol.density, spacing, spacing, spacing)
            g = np.stack([gx, gy, gz], axis=-1) / self.cube.half_extent
            self._normal_grid = g.reshape(self.S**3, 3)
        return self._normal_grid


def _is_identity(T: RigidTransform) -> bool:
    return bool(np.array_equal(T.R, np.eye(3)) and not np.any(T.t))


def _trace_chunk(scene: _Scene, origins, dirs, pixel_ids, stream, keep):
    cfg = scene.cfg
    n = cfg.n_samples
    Rn = len(origins)
    tn, tf, hit = ray_cube_intersect_batch(origins, dirs, scene.cube)
    delta = (tf - tn) / n
    if cfg.jitter:
        ctr = pixel_ids[:, None].astype(np.uint64) * np.uint64(n) + np.arange(n, dtype=np.uint64)
        frac = hashed_uniform(cfg.seed, stream * 16 + _JITTER_STREAM, ctr)
    else:
        frac = np.full((Rn, n), 0.5)
    t = tn[:, None] + (np.arange(n)[None, :] + frac) * delta[:, None]
    x_d = origins[:, None, :] + t[..., None] * dirs[:, None, :]
    flat = x_d.reshape(-1, 3)

    if scene.bypass:
        skin = None
        x_c = flat
        empty = np.zeros(len(flat), dtype=bool)
    else:
        skin = inverse_skin(flat, scene.poses, scene.vol, scene.cube)
        x_c = skin.x_c
        empty = skin.empty
    st = trilinear_stencil(scene.S, world_to_texture(scene.cube, x_c), with_grad=keep and scene.vol.n_parts > 1)
    both = st.gather(scene.fields)
    sig, col = both[:, 0], both[:, 1:]
    sig = np.where(empty, 0.0, sig)
    col = np.where(empty[:, None], 0.0, col)
    if cfg.density_noise_sigma > 0:
        ctr = pixel_ids[:, None].astype(np.uint64) * np.uint64(n) + np.arange(n, dtype=np.uint64)
        noise = hashed_normal(cfg.seed, stream * 16 + _NOISE_STREAM, ctr).ravel()
        pre = sig + cfg.density_noise_sigma * noise
        active = (pre > 0) & st.inside & ~empty
        sig = np.maximum(pre, 0.0)
    else:
        active = st.inside & ~empty
    sig = sig.reshape(Rn, n) * hit[:, None]
    col = col.reshape(Rn, n, 3)

    tau = sig * delta[:, None]
    cum = np.cumsum(tau, axis=1)
    trans = np.exp(-np.concatenate([np.zeros((Rn, 1)), cum[:, :-1]], axis=1))
    alpha = -np.expm1(-tau)
    w = trans * alpha
    t_final = np.exp(-cum[:, -1])

    acc = w.sum(axis=1)
    rgb = np.einsum("rn,rnc->rc", w, col)
    if cfg.include_background:
        rgb = rgb + (t_final * hit)[:, None] * scene.vol.bg_color
    depth = (w * t).sum(axis=1) / np.maximum(acc, 1e-8)

    wf = w.reshape(-1)
    P = scene.vol.n_parts
    if skin is None:
        part_w = np.ones((len(flat), 1))
    else:
        part_w = skin.weights
    parts = np.einsum("rn,rnp->rp", w, part_w.reshape(Rn, n, P))
    ps = parts.sum(axis=1, keepdims=True)
    parts = np.where(ps > 1e-12, parts / np.where(ps > 1e-12, ps, 1.0), 0.0)

    if cfg.with_normals:
        grad = st.gather(scene.normal_grid)  # (N, 3)
        if skin is not None:
            dominant = np.argmax(skin.weights, axis=1)
            grad = np.einsum("nij,nj->ni", scene.R[dominant], grad)
        nrm = np.einsum("n,ni->ni", wf, -grad).reshape(Rn, n, 3).sum(axis=1)
        ln = np.linalg.norm(nrm, axis=1, keepdims=True)
        normals = np.where(ln > 1e-12, nrm / np.where(ln > 1e-12, ln, 1.0), 0.0)
    else:
        normals = np.zeros((Rn, 3))

    out = dict(rgb=rgb, depth=depth, occupancy=acc, normals=normals, parts=parts,
               transmittance=np.where(hit, t_final, 1.0))
    cache = None
    if keep:
        cache = _Chunk(delta=delta, t=t, sigma=sig, active=active.reshape(Rn, n) & hit[:, None],
                       color=col, weights=w, trans=trans, t_final=t_final, hit=hit,
                       skin=skin, stencil=st)
    return out, cache


def _backward_chunk(scene: _Scene, cache: _Chunk, d_rgb, d_occ):
    """Gradients of a scalar loss w.r.t. the activated density/rgb/logit grids."""
    S3 = scene.S**3
    w, col, trans, delta = cache.weights, cache.color, cache.trans, cache.delta
    Rn, n = w.shape
    bg = scene.vol.bg_color if scene.cfg.include_background else np.zeros(3)
    # per-sample colour projected on the upstream gradient
    cg = np.einsum("rnc,rc->rn", col, d_rgb)
    bgg = (d_rgb @ bg) * cache.hit
    tail = np.cumsum((w * cg)[:, ::-1], axis=1)[:, ::-1]
    after = tail - w * cg  # sum over i > j of w_i * (c_i . g)
    t_next = trans * np.exp(-cache.sigma * delta[:, None])
    d_sigma = delta[:, None] * (
        t_next * cg - after - (cache.t_final * bgg)[:, None] + (cache.t_final * d_occ)[:, None]
    )
    d_sigma = np.where(cache.active, d_sigma, 0.0)
    d_col = w[..., None] * d_rgb[:, None, :]
    d_col = d_col * cache.hit[:, None, None]
    if cache.skin is not None:
        d_col = np.where(cache.skin.empty.reshape(Rn, n)[..., None], 0.0, d_col)

    st = cache.stencil
    ds = d_sigma.reshape(-1, 1)
    dc = d_col.reshape(-1, 3)
    g_both = st.scatter(np.concatenate([ds, dc], axis=1), S3)
    g_density, g_rgb = g_both[:, 0], g_both[:, 1:]
    g_logits = None
    skin = cache.skin
    P = scene.vol.n_parts
    if skin is not None and P > 1:
        # spatial derivatives at the canonical sample move x_c, which depends on the logits
        grad_both = st.gather_grad(scene.fields)
        g_tex = np.einsum("nc,ncd->nd", np.concatenate([ds, dc], axis=1), grad_both)
        g_xc = g_tex / scene.cube.half_extent
        live = ~skin.empty
        dw = np.einsum("nd,npd->np", g_xc, skin.y)
        dw_mean = np.einsum("np,np->n", skin.weights, dw)
        denom = np.where(live, skin.denom, 1.0)
        da = np.where(live[:, None], (dw - dw_mean[:, None]) / denom[:, None], 0.0)
        logits_flat = np.zeros((S3, P))
        eye = np.eye(P)
        for p in range(P):
            s = skin.soft[:, p, :]
            s_own = s[:, p]
            coef = da[:, p] * skin.mask[:, p] * s_own
            dlog = coef[:, None] * (eye[p][None, :] - s)
            logits_flat += skin.stencils[p].scatter(dlog, S3)
        g_logits = logits_flat
    else:
        g_logits = np.zeros((S3, P))
    return g_density, g_rgb, g_logits


# --- public entry points ---------------------------------------------------------

def _chunks(n_rays: int):
    return [(s, min(s + CHUNK_RAYS, n_rays)) for s in range(0, n_rays, CHUNK_RAYS)]


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def render_rays(vol, poses, origins, dirs, cube, cfg: RenderConfig, pixel_ids=None, stream: int = 0,
                keep: bool = False, bypass_skinning: bool | None = None):
    """Render arbitrary ``(N, 3)`` rays; returns flat outputs and optional caches.

    ``bypass_skinning`` defaults to skipping the inverse-skinning lookup when the
    volume has one part at the identity pose, where it is an exact no-op.
    """
    scene = _Scene(vol, poses, cube, cfg, bypass_skinning)
    o = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    d = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    ids = np.arange(len(o)) if pixel_ids is None else np.asarray(pixel_ids).reshape(-1)
    spans = _chunks(len(o))
    results = _map(lambda s: _trace_chunk(scene, o[s[0]:s[1]], d[s[0]:s[1]], ids[s[0]:s[1]], stream, keep),
                   spans, cfg.workers)
    flat = {k: np.concatenate([r[0][k] for r in results]) for k in results[0][0]}
    caches = [(s, r[1]) for s, r in zip(spans, results)] if keep else None
    return flat, caches, scene


def render(vol: CanonicalVolume, poses: PartPoseSet, cam: PinholeCamera, cube: RenderCube,
           cfg: RenderConfig | None = None, stream: int = 0,
           bypass_skinning: bool | None = None) -> RenderOutput:
    """Render the posed volume through every pixel of ``cam``."""
    cfg = cfg or RenderConfig()
    origins, dirs = make_rays(cam)
    flat, _, _ = render_rays(vol, poses, origins, dirs, cube, cfg, stream=stream,
                             bypass_skinning=bypass_skinning)
    return _to_image(flat, cam.height, cam.width, vol.n_parts)


def _to_image(flat, H, W, P) -> RenderOutput:
    return RenderOutput(
        rgb=flat["rgb"].reshape(H, W, 3),
        depth=flat["depth"].reshape(H, W),
        occupancy=flat["occupancy"].reshape(H, W),
        normals=flat["normals"].reshape(H, W, 3),
        parts=flat["parts"].reshape(H, W, P),
        transmittance=flat["transmittance"].reshape(H, W),
    )


def render_with_grad(vol, poses, cam, cube, cfg: RenderConfig, stream: int = 0):
    """Render and return a closure computing grid gradients from image-space gradients.

    The closure takes ``d_rgb (H, W, 3)`` and ``d_occ (H, W)`` and returns the
    gradients with respect to the activated ``density (S, S, S)``,
    ``rgb (S, S, S, 3)`` and ``lbs_logits (S, S, S, P)`` grids. Chunk gradients are
    summed in chunk order so the result does not depend on ``cfg.workers``.
    """
    cfg = replace(cfg, with_normals=False)
    origins, dirs = make_rays(cam)
    flat, caches, scene = render_rays(vol, poses, origins, dirs, cube, cfg, stream=stream, keep=True)
    out = _to_image(flat, cam.height, cam.width, vol.n_parts)
    S, P = vol.size, vol.n_parts

    def backward(d_rgb, d_occ):
        d_rgb = np.asarray(d_rgb, dtype=np.float64).reshape(-1, 3)
        d_occ = np.asarray(d_occ, dtype=np.float64).reshape(-1)
        parts = _map(lambda sc: _backward_chunk(scene, sc[1], d_rgb[sc[0][0]:sc[0][1]], d_occ[sc[0][0]:sc[0][1]]),
                     caches, cfg.workers)
        gd = np.zeros(S**3)
        gc = np.zeros((S**3, 3))
        gl = np.zeros((S**3, P))
        for a, b, c in parts:
            gd += a
            gc += b
            gl += c
        return gd.reshape(S, S, S), gc.reshape(S, S, S, 3), gl.reshape(S, S, S, P)

    return out, backward
