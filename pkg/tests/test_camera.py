import numpy as np
import pytest

from facescene import camera
from facescene.camera import (
    BehindCameraError, Intrinsics, NonPositiveDepthError, Pose,
    decode_translation, intrinsic_matrix, project, rotation_from_axis_angle,
    unproject,
)


def test_intrinsic_matrix_512():
    k = intrinsic_matrix(Intrinsics(512, 512, 512))
    np.testing.assert_array_equal(k, [[512, 0, 256], [0, 512, 256], [0, 0, 1]])


def test_intrinsic_matrix_tiny():
    k = intrinsic_matrix(Intrinsics(1, 32, 32))
    np.testing.assert_array_equal(k, [[1, 0, 16], [0, 1, 16], [0, 0, 1]])


def test_intrinsic_determinant_is_f_squared():
    for f in (1.0, 37.5, 1015.0):
        k = intrinsic_matrix(Intrinsics(f, 64, 96))
        assert np.linalg.det(k) == pytest.approx(f * f, rel=1e-12)


def test_frame_size_must_be_multiple_of_32():
    with pytest.raises(ValueError):
        Intrinsics(100.0, 100, 64)
    with pytest.raises(ValueError):
        Intrinsics(100.0, 64, 0)
    with pytest.raises(ValueError):
        Intrinsics(-1.0, 64, 64)


def test_rotation_zero_is_identity():
    np.testing.assert_array_equal(rotation_from_axis_angle(np.zeros(3)), np.eye(3))


def test_rotation_pi_about_x():
    r = rotation_from_axis_angle(np.array([np.pi, 0.0, 0.0]))
    np.testing.assert_allclose(r, np.diag([1.0, -1.0, -1.0]), atol=1e-12)


def test_rotation_orthonormal_random():
    rng = np.random.default_rng(3)
    for _ in range(50):
        rot = rng.uniform(-np.pi, np.pi, 3)
        r = rotation_from_axis_angle(rot)
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-12
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-12)


def test_rotation_tiny_angle_smooth():
    r = rotation_from_axis_angle(np.array([1e-10, 0, 0]))
    assert np.abs(r - np.eye(3)).max() < 1e-9


def test_rotation_jacobian_matches_fd():
    rng = np.random.default_rng(4)
    for rot in [np.zeros(3), np.array([1e-9, 0, 0])] + [rng.uniform(-2, 2, 3) for _ in range(5)]:
        jac = camera.rotation_jacobian(rot)
        h = 1e-6
        for i in range(3):
            rp, rm = rot.copy(), rot.copy()
            rp[i] += h
            rm[i] -= h
            fd = (rotation_from_axis_angle(rp) - rotation_from_axis_angle(rm)) / (2 * h)
            assert np.abs(jac[i] - fd).max() < 1e-8


def test_decode_translation_centered():
    intr = Intrinsics(512, 512, 512)
    pose = Pose(trans_code=[0, 0, 5], face_center=[256, 256])
    np.testing.assert_allclose(decode_translation(pose, intr), [0, 0, 5])


def test_decode_translation_offset_center():
    # with the center one focal length right of midframe, t_x = d_z exactly
    for f in (17.0, 512.0):
        intr = Intrinsics(f, 512, 512)
        pose = Pose(trans_code=[0, 0, 2], face_center=[256 + f, 256])
        np.testing.assert_allclose(decode_translation(pose, intr), [2, 0, 2])


def test_decode_translation_rejects_zero_depth():
    intr = Intrinsics(512, 512, 512)
    with pytest.raises(NonPositiveDepthError):
        decode_translation(Pose(trans_code=[0, 0, 0], face_center=[0, 0]), intr)


def test_project_on_axis():
    intr = Intrinsics(512, 512, 512)
    pose = Pose(trans_code=[0, 0, 5], face_center=[256, 256])
    uv, z = project(np.zeros((3, 1)), pose, intr)
    np.testing.assert_allclose(uv[:, 0], [256, 256])
    assert z[0] == pytest.approx(5.0)


def test_project_unit_x():
    intr = Intrinsics(512, 512, 512)
    pose = Pose(trans_code=[0, 0, 5], face_center=[256, 256])
    uv, _ = project(np.array([[1.0], [0.0], [0.0]]), pose, intr)
    np.testing.assert_allclose(uv[:, 0], [256 + 512 / 5, 256])


def test_project_behind_camera_raises():
    intr = Intrinsics(512, 512, 512)
    pose = Pose(trans_code=[0, 0, 5], face_center=[256, 256])
    with pytest.raises(BehindCameraError):
        project(np.array([[0.0], [0.0], [-6.0]]), pose, intr)


def test_unproject_roundtrip():
    intr = Intrinsics(777.0, 256, 192)
    rng = np.random.default_rng(8)
    pose = Pose(rot=[0.2, -0.4, 0.1], trans_code=[3.0, -2.0, 6.0], face_center=[120, 100])
    pts = rng.uniform(-1, 1, (3, 40))
    uv, z = project(pts, pose, intr)
    back = unproject(uv, z, pose, intr)
    assert np.abs(back - pts).max() / np.abs(pts).max() < 1e-9


def test_shared_camera_translation_property():
    # identical shapes at equal depth whose centers differ project to the
    # same silhouette shifted by exactly the center offset; depth must be
    # constant across the outline (perspective parallax otherwise adds a
    # per-point term), so the outline points live in a z = const plane
    intr = Intrinsics(1015.0, 512, 512)
    rng = np.random.default_rng(11)
    pts = rng.uniform(-1, 1, (3, 100))
    pts[2] = 0.0
    rot = np.array([0.0, 0.0, 0.7])  # in-plane rotation keeps depth constant
    base = Pose(rot=rot, trans_code=[0.5, -1.0, 9.0], face_center=[200, 260])
    shifted = Pose(rot=rot, trans_code=[0.5, -1.0, 9.0], face_center=[251.5, 180.25])
    uv_a, _ = project(pts, base, intr)
    uv_b, _ = project(pts, shifted, intr)
    delta = uv_b - uv_a
    np.testing.assert_allclose(delta[0], 51.5, atol=1e-6)
    np.testing.assert_allclose(delta[1], -79.75, atol=1e-6)


def test_scale_from_depth():
    # halving the depth of a small centered face doubles its projected
    # bounding-box diagonal; the residual error scales with the face's
    # axial extent over distance, so a shallow face subtending < 10 deg
    # stays within 1%
    intr = Intrinsics(2048.0, 512, 512)
    rng = np.random.default_rng(12)
    pts = rng.uniform(-1, 1, (3, 200))
    pts[:2] *= 0.8   # lateral half-extent 0.8 at depth 10: ~9 deg subtense
    pts[2] *= 0.04   # shallow relief

    def diag(d_z):
        pose = Pose(trans_code=[0, 0, d_z], face_center=[256, 256])
        uv, _ = project(pts, pose, intr)
        span = uv.max(axis=1) - uv.min(axis=1)
        return float(np.hypot(*span))

    ratio = diag(10.0) / diag(20.0)
    assert abs(ratio - 2.0) < 0.02  # 1% of the doubled size


def test_project_backward_matches_fd():
    intr = Intrinsics(300.0, 64, 64)
    rng = np.random.default_rng(13)
    pts = rng.uniform(-1, 1, (3, 7)) + np.array([[0], [0], [5.0]])
    g_uv = rng.standard_normal((2, 7))
    g_z = rng.standard_normal(7)
    grad = camera.project_camera_points_backward(pts, intr, g_uv, g_z)

    def scalar(p):
        uv, z = camera.project_camera_points(p, intr)
        return float((uv * g_uv).sum() + (z * g_z).sum())

    h = 1e-7
    for i in range(3):
        for j in range(7):
            pp, pm = pts.copy(), pts.copy()
            pp[i, j] += h
            pm[i, j] -= h
            fd = (scalar(pp) - scalar(pm)) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-6, abs=1e-9)
