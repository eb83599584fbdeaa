import json
import subprocess
import sys

import numpy as np
import pytest
import yaml

from patchmask import cli, resnet
from patchmask.scene import read_mask

NET_YAML = {"network": {"depth_param_n": 1, "stage_widths": [2, 4, 4]},
            "train": {"batch_size": 32, "max_epochs": 1, "min_epochs": 1}}


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["synth", "--out", str(d), "--count", "2", "--land-types", "urban,barren",
                     "--width", "40", "--height", "40", "--cloud-count", "3"]) == 0
    (d / "cfg.yaml").write_text(yaml.safe_dump(NET_YAML))
    return d


def test_synth_writes_manifest(data):
    lines = (data / "scenes.csv").read_text().splitlines()
    assert lines[0] == "scene_id,land_type,scene,truth" and len(lines) == 5
    assert (data / "urban_01.pmbs").exists() and (data / "barren_00_truth.pmmr").exists()


def test_pipeline(data, tmp_path, capsys):
    s = str(data)
    samples = tmp_path / "urban_00.samples"
    assert cli.main(["sample", f"{s}/urban_00.pmbs", f"{s}/urban_00_truth.pmmr", str(samples),
                     "--quota", "100", "--scene-id", "urban_00"]) == 0
    assert "75 train, 25 val" in capsys.readouterr().out
    run = tmp_path / "run"
    assert cli.main(["train", "--config", str(data / "cfg.yaml"), "--scenes", f"{s}/scenes.csv",
                     "--samples", str(samples), "--out", str(run), "--bands", "red,green,blue,nir"]) == 0
    ckpt = run / "best.pmck"
    assert resnet.load_checkpoint(ckpt).config.input_channels == 4
    assert (run / "history.csv").read_text().count("\n") == 2

    pred = tmp_path / "p.pmmr"
    assert cli.main(["infer", f"{s}/urban_01.pmbs", str(pred), "--checkpoint", str(ckpt),
                     "--bands", "red,green,blue,nir", "--threads", "2", "--tile-size", "100",
                     "--png", str(tmp_path / "p.png"), "--rgb"]) == 0
    out = capsys.readouterr().out
    assert "clear=" in out and (tmp_path / "p_rgb.png").exists()
    mask = read_mask(pred)
    assert mask.confidence is not None and mask.shape == (40, 40)

    assert cli.main(["evaluate", str(pred), f"{s}/urban_01_truth.pmmr", "--json", str(tmp_path / "r.json")]) == 0
    assert "Accuracy" in capsys.readouterr().out
    assert json.load(open(tmp_path / "r.json"))["n"] == int(mask.valid.sum())

    re = tmp_path / "re.pmmr"
    assert cli.main(["rethreshold", str(pred), str(re), "--threshold", "0.9"]) == 0
    np.testing.assert_array_equal(read_mask(re).labels == 1, mask.confidence >= np.float32(0.9))
    assert cli.main(["render", str(re), str(tmp_path / "r.png"), "--scene", f"{s}/urban_01.pmbs"]) == 0
    assert (tmp_path / "r_rgb.png").exists()


def test_experiment_and_env_output(data, tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "envout"))
    code = cli.main(["experiment", "land_type_specific", "--manifest", str(data / "scenes.csv"),
                     "--config", str(data / "cfg.yaml"), "--quota", "60", "--folds", "0"])
    assert code == 0
    table = capsys.readouterr().out
    assert "urban" in table and "barren" in table and "Average" in table
    doc = json.load(open(tmp_path / "envout" / "experiment.json"))
    assert doc["quota"] == 60 and doc["train_config"]["max_epochs"] == 1


def test_flags_override_config(data):
    cfg = yaml.safe_load((data / "cfg.yaml").read_text())
    args = cli.build_parser().parse_args(["experiment", "ablation", "--manifest", "m.csv", "--max-epochs", "3",
                                          "--seed", "7"])
    net, tc, seed = cli.build_configs(args, cfg)
    assert net.stage_widths == (2, 4, 4) and tc.max_epochs == 3 and tc.batch_size == 32 and seed == 7


def test_errors_exit_2(tmp_path, capsys):
    assert cli.main(["evaluate", str(tmp_path / "nope.pmmr"), str(tmp_path / "x.pmmr")]) == 2
    (tmp_path / "bad.yaml").write_text("network: {depth: 3}\n")
    assert cli.main(["experiment", "ablation", "--manifest", "m.csv", "--config", str(tmp_path / "bad.yaml")]) == 2
    assert "unknown network settings" in capsys.readouterr().err
    (tmp_path / "junk.pmmr").write_bytes(b"JUNK" + bytes(40))
    assert cli.main(["rethreshold", str(tmp_path / "junk.pmmr"), str(tmp_path / "o"), "--threshold", "0.5"]) == 2


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "patchmask.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for sub in ("import", "synth", "sample", "train", "infer", "evaluate", "rethreshold", "render", "experiment"):
        assert sub in out.stdout
