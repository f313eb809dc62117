"""Command-line entry point.

Exit status: 0 on success, 1 on a usage error, 2 when the command fails at run time
(the message goes to standard error). Tabular results go to standard output as CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from voxanim import metrics, plotting, sceneio
from voxanim.errors import IoError, MalformedManifest, ShapeMismatch, VoxAnimError
from voxanim.geometry import compose, rot_y, rotation_about
from voxanim.optimizer import InversionConfig, LossWeights, Target, invert_scene, write_trace
from voxanim.pnp import KeypointCorrespondence, reprojection_error, solve_epnp
from voxanim.renderer import RenderConfig, render

log = logging.getLogger("voxanim")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p):
    p.add_argument("--seed", type=int, default=0, help="seed for every random stream")
    p.add_argument("--workers", type=int, default=1, help="threads for ray chunks")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="voxanim", description="Voxel-volume animation numerics.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic ground-truth scene")
    _common(p)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--parts", type=int, default=1)
    p.add_argument("--blobs", type=int, default=2, help="density blobs per part")
    p.add_argument("--layout", choices=("onehot", "soft"), default="onehot")
    p.add_argument("--frames", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render", help="render a scene at one set of part poses")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--no-bg", action="store_true")
    p.add_argument("--no-figure", action="store_true")

    p = sub.add_parser("estimate-pose", help="per-part pose from 2D keypoints")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--keypoints", required=True, help='JSON {"keypoints": [[[u, v], ...] per part]}')
    p.add_argument("--out", required=True)

    p = sub.add_parser("animate", help="render every frame of a pose track")
    _common(p)
    p.add_argument("--scene", required=True)
    p.add_argument("--driving-poses", required=True)
    p.add_argument("--out-prefix", default=None, help="defaults to the track path without .json")
    p.add_argument("--novel-yaw", type=float, default=0.0, help="extra yaw (rad) about the cube center")
    p.add_argument("--filter-distances", action="store_true")
    p.add_argument("--samples", type=int, default=128)
    p.add_argument("--no-bg", action="store_true")

    p = sub.add_parser("invert", help="fit a scene to target images")
    _common(p)
    p.add_argument("--targets", required=True, help="directory holding targets.json")
    p.add_argument("--init", required=True)
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--lr", type=float, default=InversionConfig.lr)
    p.add_argument("--samples", type=int, default=RenderConfig.g_phase().n_samples)
    p.add_argument("--views-per-step", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--no-figure", action="store_true")

    p = sub.add_parser("metrics", help="compare prediction and reference arrays")
    p.add_argument("--pred", required=True)
    p.add_argument("--ref", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("--kind", choices=("pearson", "ayd", "asc", "apc"), required=True)
    p.add_argument("--rotation", type=float, default=0.0, help="applied yaw for ayd (rad)")
    p.add_argument("--figure", default=None, help="scatter plot path (pearson only)")
    return ap


# --- helpers ------------------------------------------------------------------------

def _render_cfg(args, **kw) -> RenderConfig:
    return RenderConfig(n_samples=args.samples, include_background=not getattr(args, "no_bg", False),
                        seed=args.seed, workers=args.workers, **kw)


def _write_outputs(out, prefix: str, figure: bool = True) -> list:
    files = [(f"{prefix}.rgb.ppm", "rgb"), (f"{prefix}.depth.pfm", "depth"), (f"{prefix}.occ.pfm", "occupancy")]
    sceneio.write_image(out.rgb, files[0][0])
    sceneio.write_depth(out.depth, files[1][0])
    sceneio.write_pfm(out.occupancy, files[2][0])
    for p in range(out.parts.shape[-1]):
        name = f"{prefix}.parts.{p}.pfm"
        sceneio.write_pfm(out.parts[..., p], name)
        files.append((name, f"part{p}"))
    if figure:
        plotting.plot_render(out, f"{prefix}.png")
        files.append((f"{prefix}.png", "figure"))
    return files


def _csv_out(header, rows):
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)


def _load_array(path) -> np.ndarray:
    path = str(path)
    if path.endswith(".pfm"):
        return sceneio.read_pfm(path).astype(np.float64)
    if path.endswith(".ppm"):
        return sceneio.read_image(path)
    try:
        return np.atleast_1d(np.loadtxt(path, delimiter=",", ndmin=1))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}", filename=path) from exc
    except ValueError as exc:
        raise MalformedManifest(f"{path}: not a numeric CSV ({exc})") from exc


# --- commands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = sceneio.SynthSpec(size=args.size, n_parts=args.parts, blobs_per_part=args.blobs,
                             layout=args.layout, frames=args.frames)
    scene = sceneio.synth_scene(args.seed, spec)
    sceneio.save_scene(scene, args.out)
    _csv_out(["size", "parts", "frames", "path"], [[spec.size, spec.n_parts, spec.frames, args.out]])
    return 0


def cmd_render(args) -> int:
    scene = sceneio.load_scene(args.scene)
    poses = sceneio.load_poses(args.poses)
    out = render(scene.volume, poses, scene.camera, scene.cube, _render_cfg(args))
    files = _write_outputs(out, args.out_prefix, figure=not args.no_figure)
    _csv_out(["artifact", "path"], [[k, f] for f, k in files])
    return 0


def cmd_estimate_pose(args) -> int:
    scene = sceneio.load_scene(args.scene)
    if scene.keypoints is None:
        raise MalformedManifest(f"{args.scene}: scene has no canonical keypoints")
    data = sceneio._read_json(args.keypoints)
    if "keypoints" not in data:
        raise MalformedManifest(f"{args.keypoints}: missing 'keypoints'")
    k2d = data["keypoints"]
    if len(k2d) != scene.volume.n_parts:
        raise MalformedManifest(f"{len(k2d)} keypoint sets for {scene.volume.n_parts} parts")
    poses, errs = [], []
    for p, uv in enumerate(k2d):
        corr = KeypointCorrespondence(scene.keypoints[p], np.asarray(uv, dtype=np.float64))
        T = solve_epnp(corr, scene.camera)
        poses.append(T)
        errs.append(reprojection_error(corr, T, scene.camera))
    sceneio.save_poses(poses, args.out, reprojection_error=errs)
    _csv_out(["part", "reprojection_error"], [[p, repr(e)] for p, e in enumerate(errs)])
    return 0


def cmd_animate(args) -> int:
    scene = sceneio.load_scene(args.scene)
    frames = sceneio.load_track(args.driving_poses)
    if args.filter_distances:
        frames = metrics.filter_part_distances(frames, scene.cube)
    if args.novel_yaw:
        spin = rotation_about(rot_y(args.novel_yaw), scene.cube.center)
        frames = [[compose(spin, T) for T in f] for f in frames]
    prefix = args.out_prefix or str(Path(args.driving_poses).with_suffix(""))
    cfg = _render_cfg(args, with_normals=False)
    rows = []
    for k, poses in enumerate(frames):
        out = render(scene.volume, poses, scene.camera, scene.cube, cfg, stream=k)
        fp = f"{prefix}.{k:04d}"
        sceneio.write_image(out.rgb, f"{fp}.rgb.ppm")
        sceneio.write_depth(out.depth, f"{fp}.depth.pfm")
        rows.append([k, repr(float(out.occupancy.mean())), f"{fp}.rgb.ppm"])
    _csv_out(["frame", "mean_occupancy", "rgb"], rows)
    return 0


def _load_targets(directory) -> list:
    root = Path(directory)
    data = sceneio._read_json(root / "targets.json")
    items = data.get("targets") if isinstance(data, dict) else None
    if not items:
        raise MalformedManifest(f"{root / 'targets.json'}: needs a non-empty 'targets' list")
    out = []
    for item in items:
        try:
            image = sceneio.read_image(root / item["image"])
            poses = item["poses"]
        except KeyError as exc:
            raise MalformedManifest(f"target entry missing {exc}") from exc
        poses = (sceneio.load_poses(root / poses) if isinstance(poses, str)
                 else [sceneio.pose_from_json(m) for m in poses])
        mask = sceneio.read_pfm(root / item["mask"]).astype(np.float64) if item.get("mask") else None
        out.append(Target(image, poses, mask))
    return out


def cmd_invert(args) -> int:
    scene = sceneio.load_scene(args.init)
    targets = _load_targets(args.targets)
    cfg = InversionConfig(
        steps=args.steps, lr=args.lr, seed=args.seed, views_per_step=args.views_per_step,
        render=RenderConfig.g_phase(n_samples=args.samples, workers=args.workers, seed=args.seed),
        weights=LossWeights(w_init=0.0),
    )
    res = invert_scene(targets, scene.volume, cfg, scene.camera, scene.cube)
    sceneio.save_scene(sceneio.Scene(res.volume, scene.cube, scene.camera, scene.keypoints, scene.pose_track),
                       args.out)
    write_trace(res.trace, args.trace)
    if not args.no_figure and res.trace:
        plotting.plot_trace(res.trace, str(Path(args.trace).with_suffix(".png")))
    _csv_out(["steps", "initial_rec", "final_rec"], [[args.steps, repr(res.initial_rec), repr(res.final_rec)]])
    return 0


def cmd_metrics(args) -> int:
    pred, ref = _load_array(args.pred), _load_array(args.ref)
    mask = _load_array(args.mask) > 0.5 if args.mask else None
    if args.kind == "pearson":
        r = metrics.pearson(pred, ref, mask)
        n = int(mask.sum()) if mask is not None else pred.size
        if args.figure:
            sel = mask if mask is not None else np.ones(pred.shape, dtype=bool)
            plotting.plot_scatter(pred[sel], ref[sel], args.figure, r=r)
        value = r
    elif args.kind == "ayd":
        d = metrics.ayd(pred, args.rotation, ref)
        if mask is not None:
            d = d[mask]
        value, n = float(np.mean(d)), int(np.size(d))
    else:
        fn = metrics.asc if args.kind == "asc" else metrics.apc
        P, R = np.atleast_2d(pred), np.atleast_2d(ref)
        if P.shape != R.shape:
            raise ShapeMismatch(f"{P.shape} vs {R.shape}")
        scores = [fn(a, b) for a, b in zip(P, R)]
        value, n = float(np.mean(scores)), len(scores)
    _csv_out(["metric", "value", "n"], [[args.kind, repr(float(value)), n]])
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "render": cmd_render,
    "estimate-pose": cmd_estimate_pose,
    "animate": cmd_animate,
    "invert": cmd_invert,
    "metrics": cmd_metrics,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if getattr(args, "workers", 1) < 1:
        print("voxanim: error: --workers must be >= 1", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (VoxAnimError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"voxanim {args.command}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())
