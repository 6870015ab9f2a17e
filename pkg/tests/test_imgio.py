import numpy as np
import pytest

from facescene import imgio


def test_ppm_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.uniform(0, 1, (12, 17, 3))
    path = tmp_path / "img.ppm"
    imgio.write_ppm(path, img)
    back = imgio.read_ppm(path)
    quantized = imgio.to_uint8(img).astype(np.float64) / 255.0
    np.testing.assert_allclose(back, quantized, atol=1e-12)


def test_ppm_writer_bit_stable(tmp_path):
    rng = np.random.default_rng(1)
    img = rng.uniform(0, 1, (8, 8, 3))
    p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    imgio.write_ppm(p1, img)
    imgio.write_ppm(p2, img.copy())
    assert p1.read_bytes() == p2.read_bytes()


def test_ppm_header_format(tmp_path):
    path = tmp_path / "img.ppm"
    imgio.write_ppm(path, np.zeros((2, 3, 3)))
    assert path.read_bytes().startswith(b"P6\n3 2\n255\n")


def test_pgm16_is_big_endian(tmp_path):
    path = tmp_path / "one.pgm"
    grid = np.array([[1.0]])
    imgio.write_pgm(path, grid, bits=16)
    blob = path.read_bytes()
    assert blob.endswith(b"\xff\xff")
    grid2 = np.array([[0.5]])
    imgio.write_pgm(path, grid2, bits=16)
    payload = path.read_bytes()[-2:]
    value = int.from_bytes(payload, "big")
    assert value == round(0.5 * 65535)


def test_pgm_roundtrip_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    payload = bytes([10, 200, 30, 40, 50, 60])
    path.write_bytes(b"P5\n# a comment\n3 2\n255\n" + payload)
    arr, maxval = imgio.read_pgm(path)
    assert maxval == 255
    np.testing.assert_allclose(arr.ravel() * 255, list(payload))


def test_mask_roundtrip(tmp_path):
    rng = np.random.default_rng(2)
    mask = rng.uniform(0, 1, (10, 10)) > 0.5
    path = tmp_path / "m.pgm"
    imgio.write_mask(path, mask)
    np.testing.assert_array_equal(imgio.read_mask(path), mask)


def test_png_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    img = rng.uniform(0, 1, (9, 11, 3))
    path = tmp_path / "img.png"
    imgio.write_png(path, img)
    back = imgio.read_image(path)
    quantized = imgio.to_uint8(img).astype(np.float64) / 255.0
    np.testing.assert_allclose(back, quantized, atol=1e-12)


def test_landmark_file_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    pts = rng.uniform(0, 256, (68, 2))
    vis = rng.uniform(0, 1, 68) > 0.3
    path = tmp_path / "lm.txt"
    imgio.write_landmarks(path, pts, vis)
    back_pts, back_vis = imgio.read_landmarks(path)
    np.testing.assert_allclose(back_pts, pts, atol=1e-6)
    np.testing.assert_array_equal(back_vis, vis)


def test_landmark_file_visibility_optional(tmp_path):
    path = tmp_path / "lm.txt"
    path.write_text("1.5 2.5\n3.0 4.0\n")
    pts, vis = imgio.read_landmarks(path)
    assert pts.shape == (2, 2)
    assert vis.all()


def test_depth_debug_pgm(tmp_path):
    depth = np.full((4, 4), np.inf)
    depth[1:3, 1:3] = [[1.0, 2.0], [3.0, 4.0]]
    path = tmp_path / "d.pgm"
    imgio.write_depth_debug(path, depth)
    arr, maxval = imgio.read_pgm(path)
    assert maxval == 65535
    assert arr[0, 0] == 0.0        # empty pixels black
    assert arr[1, 1] == 1.0        # nearest depth brightest
    assert arr[2, 2] == 0.0        # farthest depth darkest
