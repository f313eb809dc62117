import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxanim.errors import GimbalLock, PointBehindCamera
from voxanim.geometry import (
    PinholeCamera,
    RigidTransform,
    compose,
    extract_yaw,
    invert_transform,
    pixel_rays,
    project,
    rot_x,
    rot_y,
    rot_z,
    rotation_exp,
    rotation_log,
    translation,
)

angles = st.floats(-math.pi, math.pi, allow_nan=False)
coords = st.floats(-5, 5, allow_nan=False)


def random_transform(rng):
    R = rot_z(rng.uniform(-3, 3)) @ rot_y(rng.uniform(-3, 3)) @ rot_x(rng.uniform(-3, 3))
    return RigidTransform(R, rng.normal(size=3))


def test_compose_identity():
    I = RigidTransform.identity()
    out = compose(I, I)
    assert np.array_equal(out.R, np.eye(3)) and np.array_equal(out.t, np.zeros(3))


def test_compose_with_inverse_is_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        T = random_transform(rng)
        out = compose(T, invert_transform(T))
        assert np.allclose(out.R, np.eye(3), atol=1e-12)
        assert np.allclose(out.t, 0, atol=1e-12)


def test_compose_rotation_after_translation():
    T = compose(RigidTransform(rot_y(0.2), np.zeros(3)), translation(0, 0, 1))
    p = T.apply(np.zeros(3))
    assert np.allclose(p, [math.sin(0.2), 0.0, math.cos(0.2)], atol=1e-15)


def test_invert_simple_cases():
    I = invert_transform(RigidTransform.identity())
    assert np.array_equal(I.R, np.eye(3)) and np.allclose(I.t, 0)
    T = invert_transform(translation(1, 2, 3))
    assert np.array_equal(T.R, np.eye(3)) and np.array_equal(T.t, [-1.0, -2.0, -3.0])


def test_double_inverse_round_trip():
    rng = np.random.default_rng(1)
    for _ in range(50):
        T = random_transform(rng)
        back = invert_transform(invert_transform(T))
        assert np.allclose(back.R, T.R, atol=1e-12) and np.allclose(back.t, T.t, atol=1e-12)


def test_rigid_transform_validation():
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, 1.0 + 1e-7]), np.zeros(3))
    with pytest.raises(ValueError):
        RigidTransform(np.diag([1.0, 1.0, -1.0]), np.zeros(3))


@given(angles, angles, angles, angles, angles, angles)
def test_rotation_closure(a, b, c, d, e, f):
    T1 = RigidTransform(rot_z(a) @ rot_y(b) @ rot_x(c), np.zeros(3))
    T2 = RigidTransform(rot_z(d) @ rot_y(e) @ rot_x(f), np.ones(3))
    R = compose(T1, T2).R
    assert np.linalg.norm(R.T @ R - np.eye(3)) < 1e-9
    assert abs(np.linalg.det(R) - 1.0) <= 1e-9


def test_focal_length_matches_fov():
    cam = PinholeCamera()
    assert cam.focal == pytest.approx(128.0 / math.tan(0.0875), rel=1e-15)
    assert cam.principal_point == (128.0, 128.0)


def test_project_optical_axis():
    uv = project(PinholeCamera(), [0.0, 0.0, 10.5])
    assert np.allclose(uv, [[128.0, 128.0]], atol=1e-12)


def test_project_far_face_edge_hits_image_border():
    # the cube half-width at the far face is tan(fov/2) * 11.5, about 1.0088
    uv = project(PinholeCamera(), [1.0088, 0.0, 11.5])
    assert abs(uv[0, 0] - 256.0) < 0.05


def test_project_behind_camera():
    with pytest.raises(PointBehindCamera):
        project(PinholeCamera(), [0.0, 0.0, -1.0])


@given(coords, coords, st.floats(0.1, 50), st.floats(0.01, 100))
def test_project_scale_covariant(x, y, z, lam):
    cam = PinholeCamera()
    p = np.array([x, y, z])
    assert np.allclose(project(cam, lam * p), project(cam, p), rtol=1e-9, atol=1e-7)


def test_pixel_rays_round_trip():
    cam = PinholeCamera(width=64, height=48)
    px = np.array([[0.5, 0.5], [63.5, 47.5], [10.25, 30.0]])
    d = pixel_rays(cam, px)
    assert np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    assert np.allclose(project(cam, 7.0 * d), px, atol=1e-9)


def test_extract_yaw_examples():
    assert extract_yaw(np.eye(3)) == 0.0
    assert abs(extract_yaw(rot_y(0.3)) - 0.3) < 1e-12
    assert abs(extract_yaw(rot_y(0.4) @ rot_x(0.2) @ rot_z(0.1)) - 0.4) < 1e-12


@settings(max_examples=200)
@given(st.floats(-math.pi + 1e-6, math.pi - 1e-6), st.floats(-1.4, 1.4), angles)
def test_extract_yaw_property(theta, phi, psi):
    assert abs(extract_yaw(rot_y(theta) @ rot_x(phi) @ rot_z(psi)) - theta) < 1e-9


def test_extract_yaw_gimbal_lock():
    with pytest.raises(GimbalLock):
        extract_yaw(rot_y(0.3) @ rot_x(math.pi / 2))


@given(st.floats(-3.0, 3.0), st.floats(-3.0, 3.0), st.floats(-3.0, 3.0))
def test_rotation_log_exp_round_trip(a, b, c):
    R = rot_z(a) @ rot_y(b) @ rot_x(c)
    assert np.allclose(rotation_exp(rotation_log(R)), R, atol=1e-7)
