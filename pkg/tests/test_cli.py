"""End-to-end CLI behavior: flags, files, exit codes, determinism."""

import json

import numpy as np
import pytest

from drpoint.cli import main
from drpoint.data import load_png, save_xyz, synth_shapes
from drpoint.geometry import PointCloud
from drpoint.renderer import read_depth_f32


@pytest.fixture(scope="module")
def cloud_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("clouds") / "shape.xyz"
    save_xyz(synth_shapes(1, seed=0)[0][0], path)
    return path


@pytest.fixture(scope="module")
def tiny_train_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps({
        "encoder": {"layers": 2, "dim": 32, "heads": 2, "ffn_ratio": 2},
        "render": {"grid_depth": 8, "image_height": 16, "image_width": 16},
        "image_size": 28,
        "groups": 8,
        "group_size": 4,
        "vocab": 4,
        "sample_points": 64,
        "batch_size": 2,
        "moco": {"m": 0.9, "k": 16, "tau": 0.07},
        "epochs": 2,
        "seed": 3,
    }))
    return path


@pytest.fixture(scope="module")
def trained_run(tiny_train_config, tmp_path_factory):
    out = tmp_path_factory.mktemp("train") / "run"
    code = main([
        "pretrain", "--config", str(tiny_train_config),
        "--data", "synth:4", "--out", str(out),
    ])
    assert code == 0
    return out


# -- render ---------------------------------------------------------------------------


def test_render_all_poses_writes_64_files(cloud_file, tmp_path):
    out = tmp_path / "views"
    code = main(["render", "--cloud", str(cloud_file), "--poses", "all",
                 "--out", str(out), "--grid", "8", "--size", "8x8"])
    assert code == 0
    assert len(list(out.glob("view_*.png"))) == 32
    assert len(list(out.glob("view_*.f32"))) == 32
    image = read_depth_f32(out / "view_00.f32")
    assert image.pixels.shape == (8, 8)
    png = load_png(out / "view_00.png")
    assert png.shape == (8, 8)
    assert np.max(np.abs(png - np.rint(image.pixels * 255) / 255)) < 1e-9


def test_render_single_pose_deterministic(cloud_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["render", "--cloud", str(cloud_file), "--poses", "3",
                     "--out", str(out), "--grid", "8", "--size", "8x8"])
        assert code == 0
        outs.append(((out / "view_03.png").read_bytes(), (out / "view_03.f32").read_bytes()))
    assert outs[0] == outs[1]


def test_render_missing_cloud_is_usage_error(tmp_path):
    code = main(["render", "--cloud", str(tmp_path / "none.xyz"), "--out", str(tmp_path)])
    assert code == 2


def test_render_bad_pose_index(cloud_file, tmp_path):
    assert main(["render", "--cloud", str(cloud_file), "--poses", "40",
                 "--out", str(tmp_path)]) == 2
    assert main(["render", "--cloud", str(cloud_file), "--poses", "x",
                 "--out", str(tmp_path)]) == 2


def test_render_respects_thread_env(cloud_file, tmp_path, monkeypatch):
    monkeypatch.setenv("DRPOINT_THREADS", "4")
    out_par = tmp_path / "par"
    assert main(["render", "--cloud", str(cloud_file), "--poses", "all",
                 "--out", str(out_par), "--grid", "8", "--size", "8x8"]) == 0
    monkeypatch.setenv("DRPOINT_THREADS", "1")
    out_ser = tmp_path / "ser"
    assert main(["render", "--cloud", str(cloud_file), "--poses", "all",
                 "--out", str(out_ser), "--grid", "8", "--size", "8x8"]) == 0
    for t in range(32):
        assert (out_par / f"view_{t:02d}.f32").read_bytes() == \
            (out_ser / f"view_{t:02d}.f32").read_bytes()


def test_invalid_thread_env_is_usage_error(cloud_file, tmp_path, monkeypatch):
    monkeypatch.setenv("DRPOINT_THREADS", "zero")
    assert main(["render", "--cloud", str(cloud_file), "--out", str(tmp_path)]) == 2


# -- gradcheck -------------------------------------------------------------------------


def test_gradcheck_single_op_passes(capsys):
    assert main(["gradcheck", "--op", "chamfer_l2"]) == 0
    out = capsys.readouterr().out
    assert "chamfer_l2" in out and "PASS" in out


def test_gradcheck_unreachable_tolerance_fails(capsys):
    assert main(["gradcheck", "--op", "cross_modal_nce", "--tol", "1e-18"]) == 1
    assert "FAIL" in capsys.readouterr().out


def test_gradcheck_unknown_op():
    assert main(["gradcheck", "--op", "nonsense"]) == 2


# -- pretrain --------------------------------------------------------------------------


def test_pretrain_outputs(trained_run):
    lines = (trained_run / "metrics.jsonl").read_text().splitlines()
    assert len(lines) == 4  # 4 objects, batch 2, 2 epochs
    record = json.loads(lines[-1])
    assert set(record) == {"step", "lr", "l_rd", "l_rp", "l_pd", "l_moco",
                           "l_ce", "l_dr", "l_cd", "total"}
    assert (trained_run / "checkpoint_final.drck").exists()
    assert (trained_run / "checkpoint_epoch_000.drck").exists()


def test_pretrain_rerun_identical_metrics(tiny_train_config, trained_run, tmp_path):
    out = tmp_path / "again"
    assert main(["pretrain", "--config", str(tiny_train_config),
                 "--data", "synth:4", "--out", str(out)]) == 0
    assert (out / "metrics.jsonl").read_bytes() == (trained_run / "metrics.jsonl").read_bytes()


def test_pretrain_unknown_config_key(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text('{"learning_rate": 0.ta1}')
    assert main(["pretrain", "--config", str(cfg), "--data", "synth:4",
                 "--out", str(tmp_path / "o")]) == 2
    cfg.write_text('{"learning_rate": 0.1}')
    assert main(["pretrain", "--config", str(cfg), "--data", "synth:4",
                 "--out", str(tmp_path / "o")]) == 2


def test_pretrain_toml_config(tmp_path):
    cfg = tmp_path / "cfg.toml"
    cfg.write_text(
        "epochs = 1\nbatch_size = 2\ngroups = 8\ngroup_size = 4\nvocab = 4\n"
        "sample_points = 64\nimage_size = 28\n"
        "[encoder]\nlayers = 2\ndim = 32\nheads = 2\nffn_ratio = 2\n"
        "[render]\ngrid_depth = 8\nimage_height = 16\nimage_width = 16\n"
        "[moco]\nk = 8\n"
    )
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(cfg), "--data", "synth:4",
                 "--out", str(out)]) == 0
    assert (out / "metrics.jsonl").exists()


def test_pretrain_bad_synth_spec(tmp_path):
    assert main(["pretrain", "--data", "synth:abc", "--out", str(tmp_path / "x")]) == 2


def test_pretrain_manifest_dataset(tmp_path, tiny_train_config):
    data = tmp_path / "data"
    assert main(["synth", "--count", "4", "--seed", "2", "--out", str(data)]) == 0
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(tiny_train_config),
                 "--data", str(data / "manifest.jsonl"), "--out", str(out)]) == 0
    assert (out / "metrics.jsonl").exists()


# -- embed ------------------------------------------------------------------------------


def test_embed_outputs_unit_vectors(trained_run, cloud_file, tmp_path, capsys):
    ckpt = str(trained_run / "checkpoint_final.drck")
    rgb = tmp_path / "img.png"
    from drpoint.data import save_png

    save_png(np.random.default_rng(0).uniform(0, 1, (224, 224, 3)), rgb)
    code = main(["embed", "--checkpoint", ckpt, "--cloud", str(cloud_file),
                 "--rgb", str(rgb), "--depth-view", "5"])
    assert code == 0
    payload = json.loads(capsys.readouterr().out)
    assert set(payload) == {"g_p", "g_r", "g_d"}
    for key in payload:
        vec = np.array(payload[key])
        assert vec.shape == (32,)  # configured encoder dim
        assert abs(np.linalg.norm(vec) - 1.0) < 1e-6


def test_embed_deterministic(trained_run, cloud_file, capsys):
    ckpt = str(trained_run / "checkpoint_final.drck")
    main(["embed", "--checkpoint", ckpt, "--cloud", str(cloud_file)])
    first = capsys.readouterr().out
    main(["embed", "--checkpoint", ckpt, "--cloud", str(cloud_file)])
    assert capsys.readouterr().out == first


def test_embed_missing_checkpoint(cloud_file, tmp_path):
    assert main(["embed", "--checkpoint", str(tmp_path / "no.drck"),
                 "--cloud", str(cloud_file)]) == 2


# -- metrics -----------------------------------------------------------------------------


def test_metrics_identical_clouds(cloud_file, capsys):
    assert main(["metrics", "--pred", str(cloud_file), "--gt", str(cloud_file)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result == {"cd_l1": 0.0, "cd_l2": 0.0, "fscore_1pct": 1.0}


def test_metrics_hand_case(tmp_path, capsys):
    a = tmp_path / "a.xyz"
    b = tmp_path / "b.xyz"
    save_xyz(PointCloud(np.array([[0.0, 0.0, 0.0]])), a)
    save_xyz(PointCloud(np.array([[1.0, 0.0, 0.0]])), b)
    assert main(["metrics", "--pred", str(a), "--gt", str(b)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["cd_l1"] == pytest.approx(1.0)
    assert result["cd_l2"] == pytest.approx(1.0)
    assert result["fscore_1pct"] == 0.0


def test_metrics_empty_cloud_is_error(tmp_path):
    empty = tmp_path / "e.xyz"
    empty.write_text("# no points\n")
    other = tmp_path / "o.xyz"
    save_xyz(PointCloud(np.ones((1, 3))), other)
    assert main(["metrics", "--pred", str(empty), "--gt", str(other)]) == 2


# -- synth and usage --------------------------------------------------------------------------


def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "ds"
    assert main(["synth", "--count", "6", "--seed", "1", "--out", str(out)]) == 0
    manifest = (out / "manifest.jsonl").read_text().splitlines()
    assert len(manifest) == 6
    first = json.loads(manifest[0])
    assert (out / first["cloud_path"]).exists()


def test_usage_errors_exit_2():
    assert main([]) == 2
    assert main(["render"]) == 2  # missing required flags
    assert main(["not-a-command"]) == 2
