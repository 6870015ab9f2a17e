import numpy as np
import pytest

from facescene import camera, fitter, morphable
from facescene.camera import Intrinsics
from facescene.morphable import (
    DecodedFaceGrad, DimensionMismatchError, FaceParams, decode,
    decode_backward, project_landmarks,
)

from conftest import rel_err


def _centered_face(bundle, intr, depth=None):
    depth = depth or fitter.default_depth(bundle, intr, 0.5)
    return FaceParams.zeros(bundle, center=(intr.w / 2, intr.h / 2), depth=depth)


def test_zero_coefficients_give_mean_face(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    dec = decode(fp, bundle64, intr128)
    np.testing.assert_array_equal(dec.shape_model.ravel(order="C"),
                                  bundle64.mean_shape.reshape(3, -1).ravel())
    np.testing.assert_array_equal(dec.albedo, bundle64.albedo_points())


def test_unit_coefficient_adds_one_basis_column(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    fp.id[0] = 1.0
    dec = decode(fp, bundle64, intr128)
    expected = bundle64.mean_shape + bundle64.id_basis[:, 0]
    np.testing.assert_allclose(dec.shape_model.reshape(-1), expected, atol=1e-12)


def test_shape_linear_superposition(bundle64, intr128):
    rng = np.random.default_rng(0)
    delta = rng.standard_normal(bundle64.n_id)

    def shape_of(scale):
        fp = _centered_face(bundle64, intr128)
        fp.id = scale * delta
        return decode(fp, bundle64, intr128).shape_model

    base = shape_of(0.0)
    one = shape_of(1.0)
    two = shape_of(2.0)
    np.testing.assert_allclose(two - base, 2.0 * (one - base), atol=1e-9)


def test_rigid_transform_preserves_distances(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    fp.pose.rot = np.array([0.3, -0.8, 0.2])
    fp.pose.trans_code = np.array([5.0, -3.0, 7.0])
    dec = decode(fp, bundle64, intr128)
    rng = np.random.default_rng(1)
    idx = rng.integers(0, bundle64.vertex_count, (50, 2))
    d_model = np.linalg.norm(dec.shape_model[:, idx[:, 0]] - dec.shape_model[:, idx[:, 1]], axis=0)
    d_cam = np.linalg.norm(dec.shape_cam[:, idx[:, 0]] - dec.shape_cam[:, idx[:, 1]], axis=0)
    assert np.abs(d_model - d_cam).max() < 1e-9


def test_shape_cam_equals_rigid_transform(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    fp.pose.rot = np.array([0.1, 0.2, -0.3])
    dec = decode(fp, bundle64, intr128)
    r = camera.rotation_from_axis_angle(fp.pose.rot)
    t = camera.decode_translation(fp.pose, intr128)
    np.testing.assert_allclose(dec.shape_cam, r @ dec.shape_model + t[:, None], atol=1e-12)


def test_normals_unit_length(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    fp.exp[:4] = [1.0, -0.5, 0.25, 2.0]
    dec = decode(fp, bundle64, intr128)
    lens = np.linalg.norm(dec.normals, axis=0)
    assert np.abs(lens - 1.0).max() < 1e-6


def test_dimension_mismatch_rejected(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    fp.id = np.zeros(bundle64.n_id + 1)
    with pytest.raises(DimensionMismatchError):
        decode(fp, bundle64, intr128)


def test_pack_unpack_roundtrip(bundle64):
    rng = np.random.default_rng(2)
    fp = FaceParams.zeros(bundle64, center=(10.0, 20.0), depth=3.0)
    fp.center_score = 0.7
    fp.id = rng.standard_normal(bundle64.n_id)
    fp.exp = rng.standard_normal(bundle64.n_exp)
    fp.alb = rng.standard_normal(bundle64.n_alb)
    fp.pose.rot = rng.standard_normal(3)
    fp.illum = rng.standard_normal((9, 3))
    vec = fp.pack()
    assert vec.size == 258  # paper-scale layout: 1 + 80 + 64 + 80 + 6 + 27
    back = FaceParams.unpack(vec, bundle64, fp.pose.face_center)
    np.testing.assert_array_equal(back.pack(), vec)


# ---------------------------------------------------------------------------
# gradients


def _grad_scalar(fp, bundle, intr, w_cam, w_alb, w_nrm):
    dec = decode(fp, bundle, intr)
    return float(
        (dec.shape_cam * w_cam).sum() + (dec.albedo * w_alb).sum() + (dec.normals * w_nrm).sum()
    )


def test_decode_backward_matches_fd(bundle64, intr128):
    rng = np.random.default_rng(3)
    n = bundle64.vertex_count
    worst = 0.0
    for draw in range(20):
        fp = _centered_face(bundle64, intr128)
        fp.id = 0.8 * rng.standard_normal(bundle64.n_id)
        fp.exp = 0.8 * rng.standard_normal(bundle64.n_exp)
        fp.alb = 0.5 * rng.standard_normal(bundle64.n_alb)
        fp.pose.rot = rng.uniform(-0.8, 0.8, 3)
        fp.pose.trans_code[:2] = rng.uniform(-3, 3, 2)
        w_cam = rng.standard_normal((3, n))
        w_alb = rng.standard_normal((3, n))
        w_nrm = rng.standard_normal((3, n))

        dec = decode(fp, bundle64, intr128)
        grads = decode_backward(
            DecodedFaceGrad(shape_cam=w_cam, albedo=w_alb, normals=w_nrm),
            fp, bundle64, intr128, decoded=dec,
        )
        analytic = grads.pack()
        saturated = ((dec.pre_clamp_albedo <= 0.0) | (dec.pre_clamp_albedo >= 1.0)).any()

        x0 = fp.pack()
        h = 1e-5

        def f(vec):
            g = FaceParams.unpack(vec, bundle64, fp.pose.face_center)
            return _grad_scalar(g, bundle64, intr128, w_cam, w_alb, w_nrm)

        idx = rng.choice(x0.size - 27, size=40, replace=False)  # illum has no effect here
        for i in idx:
            xp, xm = x0.copy(), x0.copy()
            xp[i] += h
            xm[i] -= h
            fd = (f(xp) - f(xm)) / (2 * h)
            if max(abs(fd), abs(analytic[i])) < 1e-9:
                continue
            if saturated:
                continue  # clamp kink: covered by the subgradient test below
            worst = max(worst, float(rel_err(analytic[i], fd, floor=1e-4)))
    assert worst < 1e-4


def test_basis_gradient_is_transpose_product(bundle64, intr128):
    # with upstream weight only on shape_cam and rot = 0, the id gradient is
    # exactly basis^T applied to the weights
    rng = np.random.default_rng(4)
    fp = _centered_face(bundle64, intr128)
    w_cam = rng.standard_normal((3, bundle64.vertex_count))
    grads = decode_backward(
        DecodedFaceGrad(shape_cam=w_cam), fp, bundle64, intr128
    )
    expected = bundle64.id_basis.T @ w_cam.reshape(-1)
    assert rel_err(grads.id, expected, floor=1e-9).max() < 1e-10

    h = 1e-5
    for i in range(0, bundle64.n_id, 17):
        fp2 = _centered_face(bundle64, intr128)
        fp2.id[i] = h
        plus = decode(fp2, bundle64, intr128)
        fp2.id[i] = -h
        minus = decode(fp2, bundle64, intr128)
        fd = float(((plus.shape_cam - minus.shape_cam) * w_cam).sum()) / (2 * h)
        assert rel_err(grads.id[i], fd, floor=1e-6).max() < 1e-5


def test_zero_upstream_gives_zero_gradient(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    grads = decode_backward(DecodedFaceGrad(), fp, bundle64, intr128)
    assert not grads.pack().any()


def test_clamp_saturated_albedo_zero_gradient(bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    # push one albedo entry far past 1 so the clamp saturates it
    col = bundle64.alb_basis[:, 0]
    j = int(np.argmax(np.abs(col)))
    fp.alb[0] = 5.0 / col[j]
    dec = decode(fp, bundle64, intr128)
    flat = dec.pre_clamp_albedo.reshape(-1)
    assert flat[j] > 1.0
    w_alb = np.zeros((3, bundle64.vertex_count))
    w_alb.reshape(-1)[j] = 1.0
    grads = decode_backward(DecodedFaceGrad(albedo=w_alb), fp, bundle64, intr128, decoded=dec)
    assert np.all(grads.alb == 0.0)


# ---------------------------------------------------------------------------
# landmarks


def test_landmarks_centered_mean_face(bundle150):
    intr = Intrinsics.for_frame(256, 256)
    fp = FaceParams.zeros(bundle150, center=(128, 128),
                          depth=fitter.default_depth(bundle150, intr, 0.5))
    dec = decode(fp, bundle150, intr)
    lm = project_landmarks(dec, bundle150, fp.pose, intr)
    assert lm.shape == (68, 2)
    centroid = lm.mean(axis=0)
    assert np.abs(centroid - [128, 128]).max() < 5.0


def test_landmarks_shift_with_center(bundle150):
    intr = Intrinsics.for_frame(256, 256)
    depth = fitter.default_depth(bundle150, intr, 0.4)
    a = FaceParams.zeros(bundle150, center=(110, 128), depth=depth)
    b = FaceParams.zeros(bundle150, center=(150, 128), depth=depth)
    lm_a = project_landmarks(decode(a, bundle150, intr), bundle150, a.pose, intr)
    lm_b = project_landmarks(decode(b, bundle150, intr), bundle150, b.pose, intr)
    shift = lm_b - lm_a
    # landmark vertices share one depth plane only approximately; the exact
    # equality is in camera space, so compare against the per-point parallax
    t_a = camera.decode_translation(a.pose, intr)
    t_b = camera.decode_translation(b.pose, intr)
    _, z = camera.project(decode(a, bundle150, intr).shape_model[:, bundle150.landmark_indices],
                          a.pose, intr)
    expected = intr.f_g * (t_b[0] - t_a[0]) / z
    np.testing.assert_allclose(shift[:, 0], expected, atol=1e-9)
    np.testing.assert_allclose(shift[:, 1], 0.0, atol=1e-9)


def test_landmarks_finite_and_in_extended_frame(bundle150):
    intr = Intrinsics.for_frame(256, 256)
    fp = FaceParams.zeros(bundle150, center=(128, 128),
                          depth=fitter.default_depth(bundle150, intr, 0.5))
    fp.pose.rot = np.array([0.2, 0.9, 0.0])
    lm = project_landmarks(decode(fp, bundle150, intr), bundle150, fp.pose, intr)
    assert np.isfinite(lm).all()
    assert (lm > -64).all() and (lm[:, 0] < intr.w + 64).all() and (lm[:, 1] < intr.h + 64).all()


def test_export_obj(tmp_path, bundle64, intr128):
    fp = _centered_face(bundle64, intr128)
    dec = decode(fp, bundle64, intr128)
    path = tmp_path / "face.obj"
    morphable.export_obj(path, dec, bundle64)
    lines = path.read_text().splitlines()
    v_lines = [l for l in lines if l.startswith("v ")]
    f_lines = [l for l in lines if l.startswith("f ")]
    assert len(v_lines) == bundle64.vertex_count
    assert len(f_lines) == bundle64.triangles.shape[0]
    assert all(len(l.split()) == 7 for l in v_lines)  # v x y z r g b
    first_face = [int(tok) for tok in f_lines[0].split()[1:]]
    assert min(first_face) >= 1  # OBJ indices are 1-based
