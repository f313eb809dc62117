"""Scene persistence, PPM/PFM image files, and synthetic ground-truth scenes.

A scene is a JSON manifest (``*.scene.json``) next to three headerless
little-endian float32 grid files laid out ``[z][y][x][channel]``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from voxanim.errors import GridSizeMismatch, InvalidSpec, IoError, MalformedManifest, NonFinite
from voxanim.geometry import PinholeCamera, RigidTransform, compose, rot_x, rot_y, rotation_about, translation
from voxanim.pnp import keypoint_grid
from voxanim.volume import BG_DENSITY, CanonicalVolume, RenderCube, texture_to_world, voxel_centers

FORMAT = "voxanim-scene"
VERSION = 1
GRID_KEYS = ("density", "rgb", "lbs_logits")


@dataclass
class Scene:
    volume: CanonicalVolume
    cube: RenderCube = field(default_factory=RenderCube)
    camera: PinholeCamera = field(default_factory=PinholeCamera)
    keypoints: Optional[np.ndarray] = None  # (P, N_k, 3) canonical keypoints per part
    pose_track: Optional[list] = None  # frames -> parts -> RigidTransform

    def __post_init__(self):
        if self.keypoints is not None:
            k = np.asarray(self.keypoints, dtype=np.float64)
            if k.ndim != 3 or k.shape[0] != self.volume.n_parts or k.shape[2] != 3:
                raise ValueError(f"keypoints must be (N_p, N_k, 3), got {k.shape}")
            if not np.all(self.cube.contains(k)):
                raise ValueError("canonical keypoints must lie inside the rendering cube")
            self.keypoints = k


# --- poses as JSON ------------------------------------------------------------------

def pose_to_json(T: RigidTransform) -> list:
    return T.matrix().tolist()


def pose_from_json(rows) -> RigidTransform:
    M = np.asarray(rows, dtype=np.float64)
    if M.shape not in ((3, 4), (4, 4)):
        raise MalformedManifest(f"pose must be a 3x4 matrix, got shape {M.shape}")
    return RigidTransform.from_matrix(M)


def load_poses(path) -> list:
    """Read ``{"poses": [3x4, ...]}`` (one matrix per part)."""
    data = _read_json(path)
    if "poses" not in data:
        raise MalformedManifest(f"{path}: missing 'poses'")
    return [pose_from_json(m) for m in data["poses"]]


def save_poses(poses, path, **extra) -> None:
    _write_json(path, {"poses": [pose_to_json(p) for p in poses], **extra})


def load_track(path) -> list:
    """Read ``{"frames": [[3x4 per part], ...]}``; a scene manifest's track also works."""
    data = _read_json(path)
    frames = data.get("frames", data.get("pose_track")) if isinstance(data, dict) else None
    if frames is None:
        raise MalformedManifest(f"{path}: missing 'frames'")
    return [[pose_from_json(m) for m in frame] for frame in frames]


def save_track(frames, path) -> None:
    _write_json(path, {"frames": [[pose_to_json(p) for p in f] for f in frames]})


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise IoError(f"cannot read {path}: file not found", filename=str(path)) from exc
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}", filename=str(path)) from exc
    except json.JSONDecodeError as exc:
        raise MalformedManifest(f"{path}: invalid JSON ({exc})") from exc


def _write_json(path, obj) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=1)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}", filename=str(path)) from exc


# --- scenes -------------------------------------------------------------------------

def _stem(path: Path) -> str:
    name = path.name
    for suffix in (".scene.json", ".json"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return name


def save_scene(scene: Scene, path) -> None:
    """Write the manifest and its grid files. Grids are stored as float32."""
    path = Path(path)
    stem = _stem(path)
    vol = scene.volume
    names = {k: f"{stem}.{k}.f32" for k in GRID_KEYS}
    for key in GRID_KEYS:
        arr = np.ascontiguousarray(getattr(vol, key), dtype="<f4")
        try:
            arr.tofile(path.parent / names[key])
        except OSError as exc:
            raise IoError(f"cannot write {names[key]}: {exc}", filename=names[key]) from exc
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "size": vol.size,
        "n_parts": vol.n_parts,
        "cube": {"lo": list(scene.cube.lo), "hi": list(scene.cube.hi),
                 "texture_scale": scene.cube.texture_scale},
        "camera": {"fov": scene.camera.fov, "width": scene.camera.width, "height": scene.camera.height},
        "bg_color": vol.bg_color.tolist(),
        "bg_density": vol.bg_density,
        "grids": names,
        "keypoints": None if scene.keypoints is None else scene.keypoints.tolist(),
        "pose_track": None if scene.pose_track is None
        else [[pose_to_json(p) for p in frame] for frame in scene.pose_track],
    }
    _write_json(path, manifest)


def load_scene(path) -> Scene:
    path = Path(path)
    m = _read_json(path)
    try:
        if m.get("format") != FORMAT:
            raise MalformedManifest(f"{path}: not a {FORMAT} manifest")
        S, P = int(m["size"]), int(m["n_parts"])
        cube = RenderCube(tuple(m["cube"]["lo"]), tuple(m["cube"]["hi"]), float(m["cube"]["texture_scale"]))
        cam = PinholeCamera(float(m["camera"]["fov"]), int(m["camera"]["width"]), int(m["camera"]["height"]))
        grids = m["grids"]
        channels = {"density": 1, "rgb": 3, "lbs_logits": P}
        arrays = {}
        for key in GRID_KEYS:
            fname = path.parent / grids[key]
            try:
                raw = np.fromfile(fname, dtype="<f4")
            except FileNotFoundError as exc:
                raise IoError(f"missing grid file {grids[key]}", filename=str(fname)) from exc
            expected = S**3 * channels[key]
            if raw.size != expected:
                raise GridSizeMismatch(
                    f"{grids[key]}: {raw.size} floats, manifest implies {expected} (S={S}, C={channels[key]})")
            arrays[key] = raw.astype(np.float64)
        vol = CanonicalVolume(
            arrays["density"].reshape(S, S, S),
            arrays["rgb"].reshape(S, S, S, 3),
            arrays["lbs_logits"].reshape(S, S, S, P),
            np.asarray(m["bg_color"], dtype=np.float64),
            float(m["bg_density"]),
        )
        kp = m.get("keypoints")
        track = m.get("pose_track")
        return Scene(
            vol, cube, cam,
            None if kp is None else np.asarray(kp, dtype=np.float64),
            None if track is None else [[pose_from_json(p) for p in f] for f in track],
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, (GridSizeMismatch, MalformedManifest)):
            raise
        raise MalformedManifest(f"{path}: {exc}") from exc


# --- images ------------------------------------------------------------------------------

def to_bytes(img) -> np.ndarray:
    x = np.asarray(img, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NonFinite("image contains non-finite values")
    return np.clip(np.floor(255.0 * x + 0.5), 0, 255).astype(np.uint8)


def write_image(img, path) -> None:
    """Binary PPM (P6), 8-bit; grayscale input is replicated to three channels."""
    b = to_bytes(img)
    if b.ndim == 2:
        b = np.repeat(b[..., None], 3, axis=2)
    H, W = b.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{W} {H}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(b[..., :3]).tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}", filename=str(path)) from exc


def _read_bytes(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}", filename=str(path)) from exc


def _header_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens (``#`` comments skipped)."""
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedManifest("truncated image header")
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1  # exactly one whitespace byte ends the header


def read_image(path) -> np.ndarray:
    """Read a P6 PPM into floats in ``[0, 1]``, shape ``(H, W, 3)``."""
    data = _read_bytes(path)
    (magic, w, h, maxval), pos = _header_tokens(data, 4)
    if magic != "P6" or int(maxval) != 255:
        raise MalformedManifest(f"{path}: only 8-bit P6 images are supported")
    W, H = int(w), int(h)
    pix = np.frombuffer(data, dtype=np.uint8, count=W * H * 3, offset=pos)
    return pix.reshape(H, W, 3).astype(np.float64) / 255.0


def write_pfm(img, path) -> None:
    """Little-endian PFM: ``Pf`` for ``(H, W)``, ``PF`` for ``(H, W, 3)``; rows bottom-up."""
    x = np.asarray(img)
    if not np.all(np.isfinite(x)):
        raise NonFinite("depth map contains non-finite values")
    if x.ndim == 2:
        tag = "Pf"
    elif x.ndim == 3 and x.shape[2] == 3:
        tag = "PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {x.shape}")
    H, W = x.shape[:2]
    try:
        with open(path, "wb") as fh:
            fh.write(f"{tag}\n{W} {H}\n-1.0\n".encode("ascii"))
            fh.write(np.ascontiguousarray(np.flipud(x), dtype="<f4").tobytes())
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}", filename=str(path)) from exc


def write_depth(depth, path) -> None:
    write_pfm(np.asarray(depth), path)


def read_pfm(path) -> np.ndarray:
    data = _read_bytes(path)
    (tag, w, h, scale), pos = _header_tokens(data, 4)
    if tag not in ("Pf", "PF"):
        raise MalformedManifest(f"{path}: not a PFM file")
    W, H, C = int(w), int(h), 1 if tag == "Pf" else 3
    dtype = "<f4" if float(scale) < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dtype, count=W * H * C, offset=pos)
    arr = arr.reshape(H, W, C) if C == 3 else arr.reshape(H, W)
    return np.flipud(arr).astype(np.float32)


# --- synthetic scenes -------------------------------------------------------------------

@dataclass(frozen=True)
class SynthSpec:
    size: int = 16
    n_parts: int = 1
    blobs_per_part: int = 2
    layout: str = "onehot"  # or "soft"
    frames: int = 8
    keypoints_per_side: int = 5
    peak_density: float = 30.0
    blob_radius: float = 0.22
    part_gap: float = 0.0
    bg_color: tuple = (1.0, 1.0, 1.0)

    def validate(self) -> None:
        if self.size < 2:
            raise InvalidSpec("size must be >= 2")
        if self.n_parts < 1:
            raise InvalidSpec("n_parts must be >= 1")
        if self.blobs_per_part < 1:
            raise InvalidSpec("blobs_per_part must be >= 1")
        if self.layout not in ("onehot", "soft"):
            raise InvalidSpec(f"unknown layout {self.layout!r}")
        if self.frames < 0 or self.keypoints_per_side < 2:
            raise InvalidSpec("frames must be >= 0 and keypoints_per_side >= 2")
        if self.peak_density <= 0 or self.blob_radius <= 0:
            raise InvalidSpec("peak_density and blob_radius must be positive")


ONEHOT_LOGIT = 20.0


def part_centers(cube: RenderCube, n_parts: int) -> np.ndarray:
    """Centers of ``n_parts`` equal slabs splitting the cube along x."""
    lo, hi = np.array(cube.lo), np.array(cube.hi)
    width = (hi[0] - lo[0]) * 0.8
    xs = lo[0] + 0.1 * (hi[0] - lo[0]) + (np.arange(n_parts) + 0.5) * width / n_parts
    c = cube.center
    return np.array([[x, c[1], c[2]] for x in xs])


def synth_scene(seed: int, spec: SynthSpec | None = None, cube: RenderCube | None = None,
                camera: PinholeCamera | None = None) -> Scene:
    """Deterministic scene of Gaussian density blobs with known part layout and motion.

    Parts occupy slabs along x; each part owns ``blobs_per_part`` blobs placed
    inside its slab. Grid values are rounded to float32 so saving is lossless.
    """
    spec = spec or SynthSpec()
    spec.validate()
    cube = cube or RenderCube()
    camera = camera or PinholeCamera()
    rng = np.random.default_rng(seed)
    S, P = spec.size, spec.n_parts
    ax = voxel_centers(S)
    tz, ty, tx = np.meshgrid(ax, ax, ax, indexing="ij")
    pts = texture_to_world(cube, np.stack([tx, ty, tz], axis=-1))  # (S, S, S, 3) world

    centers = part_centers(cube, P)
    slab = (np.array(cube.hi)[0] - np.array(cube.lo)[0]) * 0.8 / P
    r = min(spec.blob_radius, slab / 4.0)
    density = np.zeros((S, S, S))
    rgb_acc = np.zeros((S, S, S, 3))
    for p in range(P):
        for _ in range(spec.blobs_per_part):
            spread = np.array([slab / 2 - 2 * r, 0.45, 0.45]).clip(0.0)
            c = centers[p] + rng.uniform(-1, 1, 3) * spread
            col = rng.uniform(0.15, 0.9, 3)
            g = spec.peak_density * np.exp(-np.sum((pts - c) ** 2, axis=-1) / (2 * r * r))
            density += g
            rgb_acc += g[..., None] * col
    rgb = rgb_acc / np.maximum(density[..., None], 1e-12)
    rgb = np.where(density[..., None] > 1e-12, rgb, 0.5)

    if P == 1:
        logits = np.zeros((S, S, S, 1))
    elif spec.layout == "onehot":
        owner = np.argmin(np.abs(pts[..., 0:1] - centers[:, 0]), axis=-1)
        logits = np.where(np.arange(P) == owner[..., None], ONEHOT_LOGIT, -ONEHOT_LOGIT)
    else:
        d2 = (pts[..., None, 0] - centers[:, 0]) ** 2
        logits = -d2 / (2 * (slab / 2) ** 2)

    f32 = lambda a: np.asarray(a, dtype=np.float32).astype(np.float64)
    vol = CanonicalVolume(f32(density), f32(np.clip(rgb, 0, 1)), f32(logits),
                          np.asarray(spec.bg_color, dtype=np.float64), BG_DENSITY)

    half = min(0.3, slab / 2 * 0.9)
    kps = np.stack([keypoint_grid(c, half, spec.keypoints_per_side) for c in centers])

    track = []
    phases = rng.uniform(0, 2 * math.pi, P)
    for k in range(spec.frames):
        s = 2 * math.pi * k / max(spec.frames, 1)
        frame = []
        for p in range(P):
            yaw = 0.25 * math.sin(s + phases[p])
            pitch = 0.1 * math.sin(2 * s + phases[p])
            spin = rotation_about(rot_y(yaw) @ rot_x(pitch), centers[p])
            shift = translation(0.03 * math.cos(s + phases[p]), 0.02 * math.sin(s), 0.05 * math.sin(s))
            frame.append(compose(shift, spin))
        track.append(frame)
    return Scene(vol, cube, camera, kps, track)
