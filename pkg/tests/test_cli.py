import numpy as np
import pytest

from facescene import cli
from facescene.cli import main, parse_config_text


@pytest.fixture(scope="module")
def bundle_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("bundle") / "synth.mf3d"
    assert main(["make-bundle", "--seed", "0", "--vertices", "96", "--out", str(path)]) == 0
    return str(path)


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, bundle_path):
    out = tmp_path_factory.mktemp("scene")
    code = main([
        "synth", "--bundle", bundle_path, "--seed", "3", "--faces", "2",
        "--width", "160", "--height", "160", "--out-dir", str(out),
    ])
    assert code == 0
    return out


def test_parse_config_text():
    cfg = parse_config_text("""
# comment
stage1_iters = 12
loss.lambda_pix = 50.0
fit.shared_light = true
name = "hello"
""")
    assert cfg == {
        "stage1_iters": 12, "loss.lambda_pix": 50.0,
        "fit.shared_light": True, "name": "hello",
    }


def test_parse_config_rejects_garbage():
    with pytest.raises(ValueError):
        parse_config_text("not a key value line")


def test_synth_outputs_exist(synth_dir):
    for name in ("image.ppm", "skin.pgm", "centers.txt", "scene_gt.txt",
                 "heatmap.pgm", "landmarks_00.txt", "landmarks_01.txt"):
        assert (synth_dir / name).exists(), name


def test_render_matches_synth_image(tmp_path, bundle_path, synth_dir):
    out = tmp_path / "render.ppm"
    code = main([
        "render", "--bundle", bundle_path, "--scene", str(synth_dir / "scene_gt.txt"),
        "--out", str(out), "--mask", str(tmp_path / "m.pgm"),
        "--depth", str(tmp_path / "d.pgm"),
    ])
    assert code == 0
    assert out.read_bytes() == (synth_dir / "image.ppm").read_bytes()


def test_detect_peaks_lists_faces(capsys, synth_dir):
    code = main(["detect-peaks", "--heatmap", str(synth_dir / "heatmap.pgm"),
                 "--threshold", "0.5"])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "row,col,score,c_x,c_y"
    assert len(lines) == 3  # header + two faces


def test_fit_and_eval_pipeline(tmp_path, bundle_path, synth_dir):
    cfg = tmp_path / "fast.cfg"
    cfg.write_text("stage1_iters = 120\nstage2_iters = 40\nstep_size = 0.02\npose_step_scale = 5.0\n")
    scene_out = tmp_path / "fitted.txt"
    trace_out = tmp_path / "trace.csv"
    code = main([
        "fit", "--bundle", bundle_path, "--config", str(cfg),
        "--image", str(synth_dir / "image.ppm"),
        "--centers", str(synth_dir / "centers.txt"),
        "--landmarks", str(synth_dir / "landmarks_00.txt"), str(synth_dir / "landmarks_01.txt"),
        "--skin", str(synth_dir / "skin.pgm"),
        "--out", str(scene_out), "--trace", str(trace_out),
    ])
    assert code == 0
    assert scene_out.exists()
    assert trace_out.read_text().startswith("iter,")

    report = tmp_path / "nme.csv"
    code = main([
        "eval-nme", "--bundle", bundle_path, "--scene", str(scene_out),
        "--gt-scene", str(synth_dir / "scene_gt.txt"), "--out", str(report),
    ])
    assert code == 0
    lines = report.read_text().strip().splitlines()
    assert lines[0] == "face,nme68,nme_dense,yaw_bucket"
    assert len(lines) == 3
    nmes = [float(l.split(",")[1]) for l in lines[1:]]
    assert all(v < 8.0 for v in nmes)  # a short fit still lands on the faces

    errors = tmp_path / "errors.txt"
    errors.write_text("\n".join(str(v) for v in nmes))
    code = main(["ced", "--errors", str(errors), "--steps", "5", "--out",
                 str(tmp_path / "ced.csv")])
    assert code == 0
    assert (tmp_path / "ced.csv").read_text().startswith("threshold,fraction")


def test_export_obj(tmp_path, bundle_path, synth_dir):
    out = tmp_path / "faces.obj"
    code = main(["export-obj", "--bundle", bundle_path,
                 "--scene", str(synth_dir / "scene_gt.txt"), "--out", str(out)])
    assert code == 0
    text = out.read_text()
    assert text.count("\nf ") > 0 and text.startswith("#")


def test_missing_bundle_is_validation_failure(tmp_path):
    code = main(["render", "--bundle", str(tmp_path / "nope.mf3d"),
                 "--scene", "x", "--out", str(tmp_path / "o.ppm")])
    assert code == cli.EXIT_VALIDATION


def test_fit_requires_centers_or_heatmap(tmp_path, bundle_path, synth_dir):
    code = main([
        "fit", "--bundle", bundle_path,
        "--image", str(synth_dir / "image.ppm"), "--out", str(tmp_path / "s.txt"),
    ])
    assert code == cli.EXIT_VALIDATION


def test_bench_command(tmp_path, bundle_path):
    out = tmp_path / "bench.csv"
    code = main(["bench", "--bundle", bundle_path, "--sizes", "1,2",
                 "--width", "128", "--height", "128", "--runs", "2",
                 "--out", str(out)])
    assert code == 0
    assert out.read_text().startswith("n,t_joint,t_perface")
