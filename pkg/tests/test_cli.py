import json
import subprocess
import sys

import numpy as np
import pytest
from helpers import blob_volume, orbit

from voxanim.cli import run
from voxanim.geometry import PinholeCamera, project
from voxanim.sceneio import Scene, SynthSpec, load_poses, read_image, save_poses, save_scene, synth_scene, write_image
from voxanim.renderer import RenderConfig, render
from voxanim.volume import CanonicalVolume, RenderCube

SMALL = PinholeCamera(width=24, height=24)


def small_scene(path, n_parts=2, seed=3):
    s = synth_scene(seed, SynthSpec(size=8, n_parts=n_parts, frames=3))
    s.camera = SMALL
    save_scene(s, path)
    return s


def csv_rows(text):
    return [line.split(",") for line in text.strip().splitlines()]


def test_synth_render_metrics_pearson_is_one(tmp_path, capsys):
    scene = tmp_path / "s.scene.json"
    assert run(["synth", "--seed", "1", "--size", "8", "--parts", "2", "--out", str(scene)]) == 0
    s = small_scene(scene, seed=1)
    save_poses(s.pose_track[1], tmp_path / "poses.json")
    prefix = str(tmp_path / "r")
    capsys.readouterr()
    assert run(["render", "--scene", str(scene), "--poses", str(tmp_path / "poses.json"),
                "--out-prefix", prefix, "--samples", "24"]) == 0
    rows = csv_rows(capsys.readouterr().out)
    assert rows[0] == ["artifact", "path"]
    assert {r[0] for r in rows[1:]} == {"rgb", "depth", "occupancy", "part0", "part1", "figure"}
    for suffix in (".rgb.ppm", ".depth.pfm", ".occ.pfm", ".parts.0.pfm", ".parts.1.pfm", ".png"):
        assert (tmp_path / f"r{suffix}").stat().st_size > 0
    assert read_image(prefix + ".rgb.ppm").shape == (24, 24, 3)
    depth = prefix + ".depth.pfm"
    assert run(["metrics", "--pred", depth, "--ref", depth, "--kind", "pearson",
                "--figure", str(tmp_path / "scatter.png")]) == 0
    rows = csv_rows(capsys.readouterr().out)
    assert rows[0] == ["metric", "value", "n"] and rows[1][0] == "pearson"
    assert float(rows[1][1]) == 1.0 and int(rows[1][2]) == 24 * 24
    assert (tmp_path / "scatter.png").exists()


def test_estimate_pose_round_trip(tmp_path, capsys):
    scene = tmp_path / "s.scene.json"
    s = small_scene(scene)
    truth = s.pose_track[2]
    k2d = [project(s.camera, T.apply(s.keypoints[p])).tolist() for p, T in enumerate(truth)]
    (tmp_path / "k.json").write_text(json.dumps({"keypoints": k2d}))
    assert run(["estimate-pose", "--scene", str(scene), "--keypoints", str(tmp_path / "k.json"),
                "--out", str(tmp_path / "est.json")]) == 0
    rows = csv_rows(capsys.readouterr().out)
    assert rows[0] == ["part", "reprojection_error"]
    assert all(float(r[1]) < 1e-6 for r in rows[1:]) and len(rows) == 3
    for A, B in zip(load_poses(tmp_path / "est.json"), truth):
        assert np.allclose(A.matrix(), B.matrix(), atol=1e-6)


def test_animate_writes_every_frame(tmp_path, capsys):
    scene = tmp_path / "s.scene.json"
    s = small_scene(scene)
    track = tmp_path / "track.json"
    track.write_text(json.dumps({"frames": [[T.matrix().tolist() for T in f] for f in s.pose_track]}))
    assert run(["animate", "--scene", str(scene), "--driving-poses", str(track), "--novel-yaw", "0.3",
                "--filter-distances", "--samples", "16", "--out-prefix", str(tmp_path / "a")]) == 0
    rows = csv_rows(capsys.readouterr().out)
    assert rows[0] == ["frame", "mean_occupancy", "rgb"] and len(rows) == 4
    for k in range(3):
        assert (tmp_path / f"a.{k:04d}.rgb.ppm").exists() and (tmp_path / f"a.{k:04d}.depth.pfm").exists()


def _invert_fixture(tmp_path):
    gt = blob_volume(8, seed=4)
    cube = RenderCube()
    tdir = tmp_path / "targets"
    tdir.mkdir()
    items = []
    for i, yaw in enumerate((-0.2, 0.2)):
        out = render(gt, [orbit(yaw)], SMALL, cube, RenderConfig(n_samples=16))
        write_image(out.rgb, tdir / f"t{i}.ppm")
        items.append({"image": f"t{i}.ppm", "poses": [orbit(yaw).matrix().tolist()]})
    (tdir / "targets.json").write_text(json.dumps({"targets": items}))
    rng = np.random.default_rng(0)
    init = CanonicalVolume(rng.uniform(0, 1, (8, 8, 8)), rng.uniform(0, 1, (8, 8, 8, 3)), np.zeros((8, 8, 8, 1)))
    save_scene(Scene(init, cube, SMALL), tmp_path / "init.scene.json")
    return tdir


def _invert(tmp_path, tdir, tag, workers):
    return run(["invert", "--targets", str(tdir), "--init", str(tmp_path / "init.scene.json"), "--steps", "8",
                "--samples", "16", "--seed", "5", "--workers", str(workers),
                "--out", str(tmp_path / f"{tag}.scene.json"), "--trace", str(tmp_path / f"{tag}.csv")])


def test_invert_writes_scene_trace_and_figure(tmp_path, capsys):
    tdir = _invert_fixture(tmp_path)
    assert _invert(tmp_path, tdir, "fit", 1) == 0
    rows = csv_rows(capsys.readouterr().out)
    assert rows[0] == ["steps", "initial_rec", "final_rec"] and rows[1][0] == "8"
    lines = (tmp_path / "fit.csv").read_text().splitlines()
    assert lines[0].startswith("step,total,rec") and len(lines) == 9
    assert (tmp_path / "fit.png").stat().st_size > 0
    assert (tmp_path / "fit.density.f32").exists()


def test_invert_bit_identical_across_workers(tmp_path):
    tdir = _invert_fixture(tmp_path)
    for w in (1, 2, 8):
        assert _invert(tmp_path, tdir, f"w{w}", w) == 0
    ref = (tmp_path / "w1.density.f32").read_bytes()
    for w in (2, 8):
        assert (tmp_path / f"w{w}.density.f32").read_bytes() == ref
        assert (tmp_path / f"w{w}.csv").read_text() == (tmp_path / "w1.csv").read_text()


def test_render_bit_identical_across_workers(tmp_path):
    scene = tmp_path / "s.scene.json"
    s = small_scene(scene)
    save_poses(s.pose_track[0], tmp_path / "p.json")
    for w in (1, 2, 8):
        assert run(["render", "--scene", str(scene), "--poses", str(tmp_path / "p.json"), "--samples", "16",
                    "--workers", str(w), "--no-figure", "--out-prefix", str(tmp_path / f"w{w}")]) == 0
    for suffix in (".rgb.ppm", ".depth.pfm", ".occ.pfm"):
        ref = (tmp_path / f"w1{suffix}").read_bytes()
        assert all((tmp_path / f"w{w}{suffix}").read_bytes() == ref for w in (2, 8))


def test_metrics_code_kinds(tmp_path, capsys):
    np.savetxt(tmp_path / "a.csv", [[0.0, 1.0, 2.0]], delimiter=",")
    np.savetxt(tmp_path / "b.csv", [[1.0, 2.0, 3.0]], delimiter=",")
    assert run(["metrics", "--pred", str(tmp_path / "a.csv"), "--ref", str(tmp_path / "b.csv"), "--kind", "asc"]) == 0
    assert csv_rows(capsys.readouterr().out)[1] == ["asc", "1.0", "1"]
    np.savetxt(tmp_path / "d.csv", [0.5], delimiter=",")
    np.savetxt(tmp_path / "c.csv", [0.25], delimiter=",")
    assert run(["metrics", "--pred", str(tmp_path / "d.csv"), "--ref", str(tmp_path / "c.csv"), "--kind", "ayd",
                "--rotation", "0.2"]) == 0
    assert float(csv_rows(capsys.readouterr().out)[1][1]) == pytest.approx(0.05, abs=1e-12)


def test_unknown_flag_is_usage_error(capsys):
    assert run(["render", "--bogus"]) == 1
    err = capsys.readouterr().err
    assert "usage:" in err


def test_missing_subcommand_is_usage_error(capsys):
    assert run([]) == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, capsys):
    assert run(["render", "--scene", str(tmp_path / "missing.scene.json"), "--poses", "p.json",
                "--out-prefix", str(tmp_path / "x")]) == 2
    assert "missing.scene.json" in capsys.readouterr().err


def test_module_entry_point_exit_codes(tmp_path):
    bad = subprocess.run([sys.executable, "-m", "voxanim", "synth", "--nope"], capture_output=True, text=True)
    assert bad.returncode == 1 and "usage:" in bad.stderr
    ok = subprocess.run([sys.executable, "-m", "voxanim", "synth", "--size", "4", "--frames", "1",
                         "--out", str(tmp_path / "t.scene.json")], capture_output=True, text=True)
    assert ok.returncode == 0 and ok.stdout.startswith("size,parts,frames,path")
