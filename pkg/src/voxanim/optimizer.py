"""Adam, analytic loss gradients with respect to raw voxel parameters, and the
scene-inversion loop.

Raw parameters are one flat float64 vector: ``[density | rgb | lbs_logits]`` with
density mapped through softplus and colour through a logistic squash.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from voxanim import losses
from voxanim.errors import NonFinite, ShapeMismatch
from voxanim.geometry import PinholeCamera, RigidTransform
from voxanim.renderer import RenderConfig, render, render_with_grad
from voxanim.volume import BG_DENSITY, CanonicalVolume, RenderCube

log = logging.getLogger(__name__)

TRACE_COLUMNS = ("step", "total", "rec", "bkg", "eq", "proj", "init", "geo")


@dataclass
class LossWeights:
    w_rec: float = 1.0
    w_bkg: float = 1.0
    w_eq: float = 1.0
    w_proj: float = 1.0
    w_init: float = 1.0
    w_geo: float = 1.0

    def __post_init__(self):
        for name, value in vars(self).items():
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")


def background_weight(w_bkg: float, epoch: int, factor: float = 0.8, every: int = 10) -> float:
    """Background-loss weight after ``epoch`` full passes over the targets."""
    return w_bkg * factor ** (epoch // every)


def step_lr(base: float, step: int, factor: float = 0.1, every: int = 750) -> float:
    return base * factor ** (step // every)


def exploration_std(step: int, start: float = 0.5, end_step: int = 1500) -> float:
    if step >= end_step or end_step <= 0:
        return 0.0
    return start * (1.0 - step / end_step)


# --- Adam --------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None


def adam_step(params, grads, state: AdamState):
    """One bias-corrected Adam update. Moment buffers are updated in place."""
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeMismatch(f"params {p.shape} vs grads {g.shape}")
    if state.m is None:
        state.m = np.zeros_like(p)
        state.v = np.zeros_like(p)
    elif state.m.shape != p.shape:
        raise ShapeMismatch(f"moment buffers {state.m.shape} vs params {p.shape}")
    state.step += 1
    state.m *= state.beta1
    state.m += (1.0 - state.beta1) * g
    state.v *= state.beta2
    state.v += (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps), state


# --- parameterization ------------------------------------------------------------------

def softplus(x):
    return np.logaddexp(0.0, x)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class ParamLayout:
    size: int
    n_parts: int

    @property
    def n_voxels(self) -> int:
        return self.size**3

    @property
    def length(self) -> int:
        return self.n_voxels * (4 + self.n_parts)

    def split(self, theta):
        S, n = self.size, self.n_voxels
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.length,):
            raise ShapeMismatch(f"expected {self.length} parameters, got {theta.shape}")
        d = theta[:n].reshape(S, S, S)
        c = theta[n : 4 * n].reshape(S, S, S, 3)
        l = theta[4 * n :].reshape(S, S, S, self.n_parts)
        return d, c, l

    def join(self, d, c, l) -> np.ndarray:
        return np.concatenate([np.ravel(d), np.ravel(c), np.ravel(l)])


def params_to_volume(theta, layout: ParamLayout, bg_color=(1.0, 1.0, 1.0),
                     bg_density: float = BG_DENSITY) -> CanonicalVolume:
    d, c, l = layout.split(theta)
    return CanonicalVolume(softplus(d), sigmoid(c), l.copy(), np.asarray(bg_color, dtype=np.float64), bg_density)


def volume_to_params(vol: CanonicalVolume) -> tuple[np.ndarray, ParamLayout]:
    """Raw parameters reproducing ``vol`` (up to clipping of saturated values)."""
    layout = ParamLayout(vol.size, vol.n_parts)
    y = np.maximum(vol.density, 1e-6)
    d = y + np.log(-np.expm1(-y))
    c = np.clip(vol.rgb, 1e-6, 1.0 - 1e-6)
    c = np.log(c) - np.log1p(-c)
    return layout.join(d, c, vol.lbs_logits), layout


# --- loss evaluation ------------------------------------------------------------------------

@dataclass
class Target:
    """One observed frame: image, the part poses that produced it, optional extras.

    ``keypoints`` holds per-part keypoint correspondences (feeds the projection
    term); ``equivariance`` holds ``(k_orig, k_warped, A)``. Neither depends on the
    volume, so they contribute to the reported loss but not to its gradient.
    """

    image: np.ndarray
    poses: Sequence[RigidTransform]
    mask: Optional[np.ndarray] = None
    keypoints: Optional[list] = None
    equivariance: Optional[tuple] = None


@dataclass
class LossEval:
    terms: dict
    grad: np.ndarray

    @property
    def total(self) -> float:
        return self.terms["total"]


def evaluate_loss(theta, layout: ParamLayout, targets: Sequence[Target], cam: PinholeCamera,
                  cube: RenderCube, cfg: RenderConfig, weights: LossWeights,
                  ref: CanonicalVolume | None = None, bg_color=(1.0, 1.0, 1.0),
                  bg_density: float = BG_DENSITY, w_bkg: float | None = None,
                  stream: int = 0, levels=losses.DEFAULT_LEVELS) -> LossEval:
    """Weighted loss over ``targets`` and its gradient w.r.t. the raw parameters.

    Per-target terms are averaged over the targets.
    """
    from voxanim.pnp import reprojection_error

    w_bkg = weights.w_bkg if w_bkg is None else w_bkg
    d_raw, c_raw, _ = layout.split(theta)
    vol = params_to_volume(theta, layout, bg_color, bg_density)
    S, P = layout.size, layout.n_parts
    g_den = np.zeros((S, S, S))
    g_rgb = np.zeros((S, S, S, 3))
    g_log = np.zeros((S, S, S, P))
    terms = dict.fromkeys(TRACE_COLUMNS[1:], 0.0)
    nt = len(targets)
    sigma_p = losses.part_mean_density(vol) if weights.w_init > 0 else None

    for k, tgt in enumerate(targets):
        img = np.asarray(tgt.image, dtype=np.float64)
        tcam = cam.resized(img.shape[1], img.shape[0])
        out, backward = render_with_grad(vol, tgt.poses, tcam, cube, cfg, stream=stream * 1024 + k)
        rec, d_rgb = losses.pyramid_reconstruction_loss_grad(out.rgb, img, levels)
        terms["rec"] += rec / nt
        d_rgb = d_rgb * (weights.w_rec / nt)
        d_occ = np.zeros(out.occupancy.shape)
        if tgt.mask is not None:
            bkg, g_o = losses.background_loss_grad(out.occupancy, tgt.mask)
            terms["bkg"] += bkg / nt
            d_occ = g_o * (w_bkg / nt)
        if tgt.keypoints is not None:
            terms["proj"] += sum(
                reprojection_error(corr, pose, tcam) for corr, pose in zip(tgt.keypoints, tgt.poses)
            ) / nt
        if tgt.equivariance is not None:
            terms["eq"] += losses.equivariance_loss(*tgt.equivariance) / nt
        if weights.w_rec > 0 or (tgt.mask is not None and w_bkg > 0):
            gd, gc, gl = backward(d_rgb, d_occ)
            g_den += gd
            g_rgb += gc
            g_log += gl
        if sigma_p is not None:
            init, d_sig = losses.init_loss_grad(tgt.poses, sigma_p)
            terms["init"] += init / nt
            if np.any(d_sig):
                gd, gl = losses.part_mean_density_grad(vol, d_sig * (weights.w_init / nt))
                g_den += gd
                g_log += gl

    if ref is not None:
        geo, gd, gl = losses.geometry_reg_loss_grad(vol, ref)
        terms["geo"] = geo
        g_den += weights.w_geo * gd
        g_log += weights.w_geo * gl

    terms["total"] = (weights.w_rec * terms["rec"] + w_bkg * terms["bkg"] + weights.w_eq * terms["eq"]
                      + weights.w_proj * terms["proj"] + weights.w_init * terms["init"]
                      + weights.w_geo * terms["geo"])
    # chain through the activations
    g_den = g_den * sigmoid(d_raw)
    s = sigmoid(c_raw)
    g_rgb = g_rgb * s * (1.0 - s)
    return LossEval(terms=terms, grad=layout.join(g_den, g_rgb, g_log))


def grad_render_loss(theta, layout: ParamLayout, poses, cam: PinholeCamera, cube: RenderCube,
                     cfg: RenderConfig, target_image, weights: LossWeights | None = None,
                     mask=None, **kw) -> np.ndarray:
    """Gradient of the weighted loss for a single target frame."""
    tgt = Target(np.asarray(target_image), poses, mask)
    return evaluate_loss(theta, layout, [tgt], cam, cube, cfg, weights or LossWeights(), **kw).grad


# --- inversion ------------------------------------------------------------------------------------

@dataclass
class InversionConfig:
    steps: int = 3000
    lr: float = 1e-2
    lr_decay: float = 0.1
    lr_decay_every: int = 750
    noise_std: float = 0.5
    noise_end_step: int = 1500
    betas: tuple = (0.5, 0.999)
    render: RenderConfig = field(default_factory=RenderConfig.g_phase)
    weights: LossWeights = field(default_factory=LossWeights)
    bkg_decay: float = 0.8
    bkg_decay_every: int = 10
    views_per_step: Optional[int] = None
    levels: tuple = losses.DEFAULT_LEVELS
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")


@dataclass
class InversionResult:
    volume: CanonicalVolume
    trace: list
    params: np.ndarray
    initial_rec: float
    final_rec: float


def _clean_rec(vol, targets, cam, cube, cfg, levels) -> float:
    total = 0.0
    for tgt in targets:
        img = np.asarray(tgt.image, dtype=np.float64)
        out = render(vol, tgt.poses, cam.resized(img.shape[1], img.shape[0]), cube,
                     RenderConfig(n_samples=cfg.n_samples, include_background=cfg.include_background,
                                  workers=cfg.workers, with_normals=False))
        total += losses.pyramid_reconstruction_loss(out.rgb, img, levels)
    return total / len(targets)


def invert_scene(targets: Sequence[Target], init: CanonicalVolume, cfg: InversionConfig,
                 cam: PinholeCamera | None = None, cube: RenderCube | None = None,
                 ref: CanonicalVolume | None = None, callback=None) -> InversionResult:
    """Fit raw voxel parameters to the target frames with Adam.

    Exploration noise is added to the raw parameters for each forward pass; the
    update is applied to the clean parameters.
    """
    if not targets:
        raise ValueError("need at least one target")
    cam = cam or PinholeCamera()
    cube = cube or RenderCube()
    theta, layout = volume_to_params(init)
    bg_color, bg_density = init.bg_color, init.bg_density
    state = AdamState(lr=cfg.lr, beta1=cfg.betas[0], beta2=cfg.betas[1])
    rng = np.random.default_rng(cfg.seed)
    n = len(targets)
    per_step = n if cfg.views_per_step is None else min(cfg.views_per_step, n)
    initial_rec = _clean_rec(init, targets, cam, cube, cfg.render, cfg.levels)
    if cfg.steps == 0:
        return InversionResult(init.copy(), [], theta, initial_rec, initial_rec)

    trace = []
    for step in range(cfg.steps):
        first = (step * per_step) % n
        batch = [targets[(first + j) % n] for j in range(per_step)]
        epoch = (step * per_step) // n
        std = exploration_std(step, cfg.noise_std, cfg.noise_end_step)
        probe = theta + std * rng.standard_normal(theta.shape) if std > 0 else theta
        rcfg = cfg.render
        if rcfg.jitter or rcfg.density_noise_sigma > 0:
            rcfg = RenderConfig(**{**vars(rcfg), "seed": rcfg.seed + step})
        ev = evaluate_loss(probe, layout, batch, cam, cube, rcfg, cfg.weights, ref=ref,
                           bg_color=bg_color, bg_density=bg_density,
                           w_bkg=background_weight(cfg.weights.w_bkg, epoch, cfg.bkg_decay, cfg.bkg_decay_every),
                           stream=0, levels=cfg.levels)
        if not (math.isfinite(ev.total) and np.all(np.isfinite(ev.grad))):
            raise NonFinite(f"non-finite loss or gradient at step {step}", step=step)
        state.lr = step_lr(cfg.lr, step, cfg.lr_decay, cfg.lr_decay_every)
        theta, state = adam_step(theta, ev.grad, state)
        row = {"step": step, **{k: ev.terms[k] for k in TRACE_COLUMNS[1:]}}
        trace.append(row)
        if callback is not None:
            callback(step, row)
        if step % 250 == 0:
            log.info("step %d total %.6f rec %.6f", step, ev.total, ev.terms["rec"])

    vol = params_to_volume(theta, layout, bg_color, bg_density)
    final_rec = _clean_rec(vol, targets, cam, cube, cfg.render, cfg.levels)
    return InversionResult(vol, trace, theta, initial_rec, final_rec)


def write_trace(trace, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_COLUMNS)
        for row in trace:
            w.writerow([row["step"]] + [repr(float(row[k])) for k in TRACE_COLUMNS[1:]])


def read_trace(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{k: (int(r[k]) if k == "step" else float(r[k])) for k in TRACE_COLUMNS} for r in rows]
