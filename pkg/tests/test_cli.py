import csv
import json

import numpy as np
import pytest

from lidar_uda import __version__
from lidar_uda import config as C
from lidar_uda.cli import COMMANDS, main
from lidar_uda.cloud import load_manifest
from lidar_uda.errors import ConfigError

TINY = ["--n_scans", "2", "--n_eval_scans", "2", "--horizontal_steps", "60", "--total_iters", "8",
        "--batch_size", "1", "--points_per_scan", "32", "--k", "8", "--quiet"]


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--preset", "desk", "--out", str(root / "data"), *TINY]) == 0
    return root / "data"


def _data_flags(d):
    return ["--source", str(d / "source"), "--target", str(d / "target"), "--eval", str(d / "target_test")]


@pytest.mark.parametrize("cmd", sorted(COMMANDS))
def test_help_exits_zero(cmd, capsys):
    with pytest.raises(SystemExit) as ei:
        main([cmd, "--help"])
    assert ei.value.code == 0
    assert "--config" in capsys.readouterr().out


def test_unknown_config_key(tmp_path, capsys):
    (tmp_path / "bad.cfg").write_text("total_iters = 3\nlearning_rate = 0.1\n")
    assert main(["train", "--config", str(tmp_path / "bad.cfg"), "--out", str(tmp_path / "o")]) == 1
    assert "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_bad_value_and_unknown_flag(tmp_path, capsys):
    assert main(["train", "--out", str(tmp_path), "--total_iters", "many"]) == 1
    assert "total_iters" in capsys.readouterr().err
    with pytest.raises(SystemExit) as ei:
        main(["train", "--out", str(tmp_path), "--no_such_key", "1"])
    assert ei.value.code == 1


def test_synth_layout(data):
    for sub in ("source", "target", "target_eval", "target_test"):
        assert (data / sub / "scans.txt").exists()
    assert load_manifest(data / "source").labeled and not load_manifest(data / "target").labeled
    run = json.loads((data / "run.json").read_text())
    assert run["command"] == "synth" and run["version"] == __version__ and run["seed"] == 0
    assert run["config"]["horizontal_steps"] == "60" and set(run["config"]) == set(C.SCHEMA)


def test_train_then_eval_reproduces_final_row(data, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--preset", "desk", "--out", str(run), *TINY, *_data_flags(data)]) == 0
    with open(run / "eval_log.csv") as f:
        last = list(csv.reader(f))[-1]
    assert last[0] == "8"
    ev = tmp_path / "ev"
    assert main(["eval", "--preset", "desk", "--out", str(ev), *TINY, "--eval", str(data / "target_test"),
                 "--checkpoint", str(run / "checkpoints" / "ckpt_0000008.bin")]) == 0
    with open(ev / "metrics.csv") as f:
        row = next(r for r in csv.reader(f) if r[0] == "mIoU")
    assert row[1] == last[1]


def test_replay_from_run_json(data, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "--preset", "desk", "--out", str(a), *TINY, *_data_flags(data)]) == 0
    assert main(["train", "--config", str(a / "run.json"), "--out", str(b), "--quiet"]) == 0
    for name in ("train_log.csv", "eval_log.csv", "checkpoints/ckpt_0000008.bin"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    assert json.loads((a / "run.json").read_text()) == json.loads((b / "run.json").read_text())


def test_align_command(data, tmp_path):
    before = (data / "source" / "scans" / "000000.bin").read_bytes()
    args = ["align", "--preset", "desk", *TINY, "--input", str(data / "source"), "--domain", "source",
            "--chain", "match_beams, xyz_shift"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    assert (data / "source" / "scans" / "000000.bin").read_bytes() == before
    src, out = load_manifest(data / "source"), load_manifest(tmp_path / "a")
    assert out.labeled and out.role == "source"
    ratio = out.load(0).n / src.load(0).n
    assert 0.15 < ratio < 0.35
    assert (tmp_path / "a" / "scans" / "000001.bin").read_bytes() == (tmp_path / "b" / "scans" / "000001.bin").read_bytes()
    assert main(["align", "--out", str(tmp_path / "c"), "--input", str(data / "source"), "--quiet"]) == 1


def test_render_command_continues_after_bad_file(data, tmp_path):
    import shutil
    shutil.copytree(data / "target_test", tmp_path / "ds")
    (tmp_path / "ds" / "scans" / "000000.bin").write_bytes(b"\0" * 20)
    code = main(["render", "--preset", "desk", *TINY, "--input", str(tmp_path / "ds"), "--out", str(tmp_path / "img")])
    assert code == 3
    assert not (tmp_path / "img" / "000000_range.pgm").exists()
    assert (tmp_path / "img" / "000001_range.pgm").exists() and (tmp_path / "img" / "000001_label.ppm").exists()
    head = (tmp_path / "img" / "000001_range.pgm").read_bytes()[:12]
    assert head.startswith(b"P5\n360 16\n")


def test_truncated_input_exit_code(data, tmp_path):
    import shutil
    shutil.copytree(data, tmp_path / "d")
    (tmp_path / "d" / "source" / "scans" / "000001.bin").write_bytes(b"\0" * 17)
    assert main(["train", "--preset", "desk", "--out", str(tmp_path / "o"), *TINY, *_data_flags(tmp_path / "d")]) == 3
    assert main(["train", "--out", str(tmp_path / "o"), "--source", str(tmp_path / "none"),
                 "--target", str(tmp_path / "none"), "--quiet"]) == 3


def test_ablate_and_sweep_commands(data, tmp_path):
    flags = ["--preset", "desk", *TINY, *_data_flags(data), "--total_iters", "3", "--stages", "base, xyz_shift",
             "--seeds", "0"]
    assert main(["ablate", "--out", str(tmp_path / "ab"), *flags]) == 0
    assert (tmp_path / "ab" / "ablation.csv").read_text().count("\n") == 1 + 2 + 2
    assert main(["sweep", "--out", str(tmp_path / "sw"), *flags, "--lambdas", "0.0, 0.1"]) == 0
    rows = list(csv.reader(open(tmp_path / "sw" / "sweep.csv")))
    assert rows[0] == ["lambda", "seed", "miou"] and rows[-1][0] == "spread"


# --------------------------------------------------------------------------
# configuration


def test_defaults_round_trip_through_text():
    cfg = C.load_config()
    again = C.resolve(cfg.to_strings())
    assert again == cfg


def test_file_sections_and_duplicates(tmp_path):
    f = tmp_path / "a.cfg"
    f.write_text("k = 4\n[train]\nlr0 = 0.5  # comment\nfov_azimuth = -90, 90\n[x]\nsource_chain = xyz_shift\n")
    cfg = C.load_config(f, {"k": "6"})
    assert cfg["k"] == 6 and cfg["lr0"] == 0.5 and cfg["fov_azimuth"] == (-90.0, 90.0)
    assert cfg["source_chain"] == ("xyz_shift",)
    f.write_text("[a]\nk = 4\n[b]\nk = 5\n")
    with pytest.raises(ConfigError, match="'k'"):
        C.load_config(f)


def test_invalid_values_rejected():
    for key, val in [("source_chain", "rotate"), ("beam_mode", "odd"), ("fov_azimuth", "1"),
                     ("source_sensor", "hdl128"), ("ground", "maybe")]:
        with pytest.raises(ConfigError, match=key):
            C.resolve({key: val})


def test_builders_apply_overrides():
    cfg = C.load_config(C.preset_path("desk"))
    s = C.sensor(cfg, "vlp16")
    assert s.horizontal_steps == 180 and s.max_range == 30.0 and s.beam_count == 16
    tc = C.train_config(cfg, seed=5)
    assert tc.seed == 5 and tc.batch_size == 2 and tc.momentum == 0.9
    spec = C.scene_spec(cfg)
    assert spec.n_sidewalks == 0 and spec.pole_radius == (0.15, 0.3)
    assert np.isinf(C.train_config(C.load_config()).fov_max_range)
