import json

import numpy as np
import pytest

from usflow.backbone import DirectField, save_checkpoint
from usflow.cli import main
from usflow.fileio import read_flow, read_raw, write_raw

TINY = ["--set", "simulate.grid.axial_samples=128", "--set", "simulate.grid.lateral_lines=32"]
SMALL = ["--set", "simulate.grid.axial_samples=256", "--set", "simulate.grid.lateral_lines=64"]


def error_of(capsys):
    err = capsys.readouterr().err.strip().splitlines()[-1]
    return json.loads(err)


def simulate(tmp_path, name, *extra):
    out = tmp_path / name
    assert main(["simulate", "--out", str(out), *extra]) == 0
    return out


def test_simulate_manifest_and_determinism(tmp_path):
    a = simulate(tmp_path, "a", "--seed", "1", "--set", "simulate.n_pairs=10", *TINY)
    b = simulate(tmp_path, "b", "--seed", "1", "--set", "simulate.n_pairs=10", *TINY)
    man = json.loads((a / "manifest.json").read_text())
    assert len(man["pairs"]) == 10
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    c = simulate(tmp_path, "c", "--config", str(a / "resolved_config.json"))
    assert (c / "pair_009_b.rfd").read_bytes() == (a / "pair_009_b.rfd").read_bytes()


def test_simulate_empty(tmp_path, caplog):
    out = simulate(tmp_path, "e", "--set", "simulate.n_pairs=0")
    assert json.loads((out / "manifest.json").read_text()) == {"pairs": []}
    assert "n_pairs is 0" in caplog.text


def test_simulated_truth_has_configured_strain(tmp_path):
    out = simulate(tmp_path, "s", "--set", "simulate.n_pairs=1", *TINY)
    axial, lateral = read_flow(out / "pair_000.gt")
    assert np.max(np.abs(np.diff(axial, axis=0) - 0.02)) < 1e-6
    assert not lateral.any()


def test_errors_are_json(tmp_path, capsys):
    assert main(["simulate", "--set", "bogus=1"]) == 2
    assert error_of(capsys)["code"] == "config_error"
    assert main(["frobnicate"]) == 2
    assert error_of(capsys)["code"] == "usage"
    assert main(["strain", "--flow", str(tmp_path / "missing.gt"), "--out", str(tmp_path)]) != 0
    assert error_of(capsys)["code"] == "io_error"
    assert main(["simulate", "--set", "simulate.axial_strain=0.5", "--out", str(tmp_path / "x")]) != 0
    assert "outside" in error_of(capsys)["message"]


def test_infer_zero_checkpoint_and_repeatability(tmp_path, capsys):
    data = simulate(tmp_path, "d", "--set", "simulate.n_pairs=1", *TINY)
    ck = save_checkpoint(DirectField((128, 32)), tmp_path / "zero")
    for run in ("i1", "i2"):
        assert main(["infer", "--checkpoint", str(ck), "--manifest", str(data / "manifest.json"),
                     "--out", str(tmp_path / run)]) == 0
    axial, lateral = read_flow(tmp_path / "i1" / "flow_pair_000.gt")
    assert not axial.any() and not lateral.any()
    assert (tmp_path / "i1" / "flow_pair_000.gt").read_bytes() == \
        (tmp_path / "i2" / "flow_pair_000.gt").read_bytes()
    bad = save_checkpoint(DirectField((64, 32)), tmp_path / "bad")
    assert main(["infer", "--checkpoint", str(bad), "--manifest", str(data / "manifest.json"),
                 "--out", str(tmp_path / "i3")]) == 1
    assert error_of(capsys)["code"] == "shape_mismatch"


def test_infer_direct_solve_recovers_shift(tmp_path):
    data = simulate(tmp_path, "sh", "--set", "simulate.n_pairs=1", "--set", "simulate.kind=shift",
                    "--set", "simulate.shift_px=[3, 0]", *SMALL)
    for run in ("a", "b"):
        assert main(["infer", "--manifest", str(data / "manifest.json"), "--out",
                     str(tmp_path / run), "--images"]) == 0
    axial, _ = read_flow(tmp_path / "a" / "flow_pair_000.gt")
    assert abs(np.median(axial) - 3.0) < 0.1
    assert (tmp_path / "a" / "flow_pair_000.gt").read_bytes() == \
        (tmp_path / "b" / "flow_pair_000.gt").read_bytes()
    assert (tmp_path / "a" / "strain_pair_000.png").exists()


def two_level_strain(path):
    img = np.empty((20, 10))
    sign = np.where((np.arange(10)[:, None] + np.arange(10)) % 2 == 0, 1.0, -1.0)
    img[:10] = 0.01 + 1e-3 * sign
    img[10:] = 0.02 + 1e-3 * sign
    write_raw(path, {"quantity": "axial_strain"}, img)


def test_metrics_command(tmp_path, capsys):
    # the f32 file rounds the values; the closed form is evaluated on what was stored
    two_level_strain(tmp_path / "s.strain")
    _, planes = read_raw(tmp_path / "s.strain")
    t, b = planes[0, :10], planes[0, 10:]
    cnr = np.sqrt(2 * (b.mean() - t.mean()) ** 2 / (b.var() + t.var()))
    windows = {"windows": [
        {"target": [[0, 10], [0, 10]], "background": [[10, 20], [0, 10]], "label": "tb"},
        {"target": [[10, 20], [0, 10]], "background": [[10, 20], [0, 10]], "label": "same"},
    ]}
    (tmp_path / "w.json").write_text(json.dumps(windows))
    assert main(["metrics", "--strain", str(tmp_path / "s.strain"), "--windows",
                 str(tmp_path / "w.json"), "--out", str(tmp_path / "m")]) == 0
    rep = json.loads((tmp_path / "m" / "metrics.json").read_text())["windows"]
    assert abs(rep[0]["cnr"] - cnr) < 1e-9
    assert abs(rep[0]["sr"] - t.mean() / b.mean()) < 1e-9
    assert rep[1]["sr"] == 1.0 and rep[1]["cnr"] == 0.0
    assert (tmp_path / "m" / "metrics.csv").read_text().count("\n") == 3
    windows["windows"][0]["target"] = [[0, 30], [0, 10]]
    (tmp_path / "w.json").write_text(json.dumps(windows))
    assert main(["metrics", "--strain", str(tmp_path / "s.strain"), "--windows",
                 str(tmp_path / "w.json"), "--out", str(tmp_path / "m")]) == 2
    assert error_of(capsys)["code"] == "invalid_windows"


def test_pipeline_hard_inclusion_has_low_strain_ratio(tmp_path):
    data = simulate(tmp_path, "inc", "--set", "simulate.n_pairs=1", "--set", "simulate.kind=inclusion",
                    "--set", "simulate.inclusion.radius_mm=1.2", *SMALL)
    assert main(["infer", "--manifest", str(data / "manifest.json"), "--out", str(tmp_path / "f")]) == 0
    assert main(["strain", "--flow", str(tmp_path / "f" / "flow_pair_000.gt"),
                 "--out", str(tmp_path / "s")]) == 0
    # inclusion centred at rows ~128, cols ~32; radius 1.2 mm ~ 62 rows, 12 lines
    win = [{"target": [[108, 148], [26, 38]], "background": [[20, 60], [4, 60]], "label": "inc"}]
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({"windows": win}))
    assert main(["metrics", "--config", str(cfg), "--strain",
                 str(tmp_path / "s" / "flow_pair_000.strain"), "--out", str(tmp_path / "m")]) == 0
    sr = json.loads((tmp_path / "m" / "metrics.json").read_text())["windows"][0]["sr"]
    assert sr < 1
    assert main(["report", "--config", str(cfg), "--manifest", str(data / "manifest.json"),
                 "--flows", str(tmp_path / "f"), "--out", str(tmp_path / "r")]) == 0
    rep = json.loads((tmp_path / "r" / "report.json").read_text())["pairs"][0]
    # report reads the f32 flow, metrics the f32 strain file
    assert rep["metrics"][0]["sr"] == pytest.approx(sr, rel=1e-6) and rep["axial_mae"] < 0.5


def test_train_command(tmp_path, capsys):
    data = simulate(tmp_path, "t", "--set", "simulate.n_pairs=2", *TINY)
    run = tmp_path / "run"
    args = ["train", "--manifest", str(data / "manifest.json"), "--out", str(run),
            "--set", "backbone.name=direct_field", "--set", "train.epochs=2",
            "--set", "train.learning_rate=0.01"]
    assert main(args) == 0
    assert (run / "checkpoint_epoch001.json").exists() and (run / "checkpoint_final.bin").exists()
    assert (run / "train_log.csv").read_text().count("\n") == 5
    resolved = json.loads((run / "resolved_config.json").read_text())
    assert resolved["train"]["epochs"] == 2 and resolved["backbone"]["name"] == "direct_field"
    first = (run / "checkpoint_final.bin").read_bytes()
    assert main(["train", "--manifest", str(data / "manifest.json"), "--out", str(tmp_path / "rerun"),
                 "--config", str(run / "resolved_config.json")]) == 0
    assert (tmp_path / "rerun" / "checkpoint_final.bin").read_bytes() == first
    empty = simulate(tmp_path, "e", "--set", "simulate.n_pairs=0")
    assert main(["train", "--manifest", str(empty / "manifest.json"), "--out", str(run)]) == 3
    assert error_of(capsys)["code"] == "training_aborted"
