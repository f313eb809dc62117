import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from helpers import world_grid

from voxanim.errors import GridSizeMismatch, InvalidSpec, IoError, MalformedManifest, NonFinite
from voxanim.geometry import rot_y, rotation_about
from voxanim.sceneio import (
    Scene,
    SynthSpec,
    load_poses,
    load_scene,
    part_centers,
    read_image,
    read_pfm,
    save_poses,
    save_scene,
    synth_scene,
    write_depth,
    write_image,
    write_pfm,
)
from voxanim.volume import CanonicalVolume, RenderCube


def random_scene(S=8, P=2, seed=0):
    rng = np.random.default_rng(seed)
    f32 = lambda a: a.astype(np.float32).astype(np.float64)
    vol = CanonicalVolume(f32(rng.uniform(0, 5, (S, S, S))), f32(rng.uniform(0, 1, (S, S, S, 3))),
                          f32(rng.normal(size=(S, S, S, P))), np.array([0.2, 0.4, 0.6]))
    cube = RenderCube()
    kp = cube.center + rng.uniform(-0.5, 0.5, (P, 4, 3))
    track = [[rotation_about(rot_y(0.1 * k + p), cube.center) for p in range(P)] for k in range(3)]
    return Scene(vol, cube, keypoints=kp, pose_track=track)


def test_scene_round_trip_is_bit_exact(tmp_path):
    s = random_scene()
    path = tmp_path / "a.scene.json"
    save_scene(s, path)
    t = load_scene(path)
    for key in ("density", "rgb", "lbs_logits", "bg_color"):
        assert np.array_equal(getattr(s.volume, key), getattr(t.volume, key)), key
    assert t.volume.bg_density == s.volume.bg_density
    assert np.array_equal(s.keypoints, t.keypoints)
    assert t.cube == s.cube and t.camera == s.camera
    for fa, fb in zip(s.pose_track, t.pose_track):
        for A, B in zip(fa, fb):
            assert np.array_equal(A.R, B.R) and np.array_equal(A.t, B.t)
    assert sorted(p.name for p in tmp_path.iterdir()) == [
        "a.density.f32", "a.lbs_logits.f32", "a.rgb.f32", "a.scene.json"]


def test_grid_files_are_raw_little_endian_float32(tmp_path):
    s = random_scene(S=4, P=1)
    save_scene(s, tmp_path / "b.scene.json")
    raw = (tmp_path / "b.rgb.f32").read_bytes()
    assert len(raw) == 4**3 * 3 * 4
    assert np.array_equal(np.frombuffer(raw, "<f4").reshape(4, 4, 4, 3), s.volume.rgb.astype(np.float32))


def test_manifest_size_mismatch(tmp_path):
    path = tmp_path / "c.scene.json"
    save_scene(random_scene(), path)
    m = json.loads(path.read_text())
    m["size"] = 64
    path.write_text(json.dumps(m))
    with pytest.raises(GridSizeMismatch):
        load_scene(path)


def test_missing_grid_file_names_the_file(tmp_path):
    path = tmp_path / "d.scene.json"
    save_scene(random_scene(), path)
    (tmp_path / "d.rgb.f32").unlink()
    with pytest.raises(IoError) as info:
        load_scene(path)
    assert "d.rgb.f32" in str(info.value) and info.value.filename.endswith("d.rgb.f32")


def test_malformed_manifest(tmp_path):
    path = tmp_path / "e.scene.json"
    path.write_text("{not json")
    with pytest.raises(MalformedManifest):
        load_scene(path)
    path.write_text(json.dumps({"format": "other"}))
    with pytest.raises(MalformedManifest):
        load_scene(path)
    with pytest.raises(IoError):
        load_scene(tmp_path / "nope.scene.json")


def test_poses_round_trip(tmp_path):
    poses = random_scene().pose_track[1]
    save_poses(poses, tmp_path / "p.json")
    back = load_poses(tmp_path / "p.json")
    assert all(np.array_equal(a.R, b.R) and np.array_equal(a.t, b.t) for a, b in zip(poses, back))


def test_ppm_white_pixel_fixture(tmp_path):
    path = tmp_path / "w.ppm"
    write_image(np.ones((1, 1, 3)), path)
    assert path.read_bytes() == b"P6\n1 1\n255\n\xff\xff\xff"
    assert np.array_equal(read_image(path), np.ones((1, 1, 3)))


def test_ppm_rounding_and_clamping(tmp_path):
    img = np.array([[[0.0, 0.5, 1.0], [-0.3, 1.7, 0.2]]])
    path = tmp_path / "r.ppm"
    write_image(img, path)
    assert path.read_bytes()[-6:] == bytes([0, 128, 255, 0, 255, 51])


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (3, 5, 3), elements=st.floats(0, 1)))
def test_ppm_round_trip_within_quantization(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("ppm") / "x.ppm"
    write_image(img, path)
    assert np.max(np.abs(read_image(path) - img)) <= 0.5 / 255 + 1e-12


def test_pfm_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    depth = rng.normal(10, 3, (7, 5)).astype(np.float32)
    write_depth(depth, tmp_path / "d.pfm")
    raw = (tmp_path / "d.pfm").read_bytes()
    assert raw.startswith(b"Pf\n5 7\n-1.0\n")
    assert np.array_equal(read_pfm(tmp_path / "d.pfm"), depth)
    col = rng.uniform(size=(3, 4, 3)).astype(np.float32)
    write_pfm(col, tmp_path / "c.pfm")
    assert np.array_equal(read_pfm(tmp_path / "c.pfm"), col)


def test_non_finite_images_rejected(tmp_path):
    img = np.zeros((2, 2, 3))
    img[1, 1, 0] = np.nan
    with pytest.raises(NonFinite):
        write_image(img, tmp_path / "n.ppm")
    with pytest.raises(NonFinite):
        write_depth(np.full((2, 2), np.inf), tmp_path / "n.pfm")


def test_synth_is_deterministic(tmp_path):
    spec = SynthSpec(size=8, n_parts=2, frames=3)
    save_scene(synth_scene(4, spec), tmp_path / "a.scene.json")
    save_scene(synth_scene(4, spec), tmp_path / "b.scene.json")
    for key in ("density", "rgb", "lbs_logits"):
        assert (tmp_path / f"a.{key}.f32").read_bytes() == (tmp_path / f"b.{key}.f32").read_bytes()
    assert not np.array_equal(synth_scene(5, spec).volume.density, synth_scene(4, spec).volume.density)


def test_synth_single_part_has_uniform_weights():
    s = synth_scene(0, SynthSpec(size=8, n_parts=1, frames=2))
    assert np.array_equal(s.volume.part_weights(), np.ones((8, 8, 8, 1)))
    assert s.keypoints.shape == (1, 125, 3) and len(s.pose_track) == 2


def test_synth_one_hot_masks_partition_the_support():
    spec = SynthSpec(size=16, n_parts=2, blobs_per_part=1, layout="onehot", blob_radius=0.12)
    s = synth_scene(1, spec)
    w = s.volume.part_weights()
    support = s.volume.density > 1e-3 * spec.peak_density
    assert np.all(np.abs(w.max(-1) - 1.0) < 1e-15)
    owner = np.argmax(w, axis=-1)
    # the two slabs meet at the cube's mid-plane in x
    x = world_grid(16)[..., 0]
    mid = RenderCube().center[0]
    expected = (x > mid).astype(int)
    assert np.array_equal(owner[support], expected[support])
    assert np.any(support & (owner == 0)) and np.any(support & (owner == 1))
    centers = part_centers(RenderCube(), 2)
    assert np.all(s.cube.contains(s.keypoints.reshape(-1, 3)))
    assert np.allclose(s.keypoints.mean(axis=1), centers, atol=1e-12)


@pytest.mark.parametrize("bad", [dict(size=1), dict(n_parts=0), dict(blobs_per_part=0), dict(layout="x"),
                                 dict(frames=-1), dict(peak_density=0.0)])
def test_synth_invalid_spec(bad):
    with pytest.raises(InvalidSpec):
        synth_scene(0, SynthSpec(**bad))
