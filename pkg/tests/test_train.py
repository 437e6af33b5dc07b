import csv
import json

import numpy as np
import pytest
import torch

from conftest import SMALL, make_pairs, pretrained_net
from usflow.backbone import DirectField, TinyPyramidNet
from usflow.fileio import write_flow, write_rfd
from usflow.loss import LossConfig
from usflow.phantom import GroundTruthDeformation, ImagingGrid, simulate_pair
from usflow.train import (DirectSolveConfig, Pair, SolveDiverged, TrainConfig, TrainingAborted,
                          _order, load_manifest, pretrain_supervised, run_direct_solve,
                          run_finetune, with_loss)

TINY = ImagingGrid(axial_samples=128, lateral_lines=32)


def params(net):
    return torch.cat([p.detach().ravel() for p in net.parameters()]).clone()


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=2)
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    assert TrainConfig.paper().learning_rate == 4e-7
    assert with_loss(TrainConfig(), lambda1=0).loss.lambda1 == 0


def test_identical_frames_stay_at_floor():
    f1, _, _ = simulate_pair(GroundTruthDeformation.zero(), 0, TINY)
    pairs = [Pair(f"s{i}", f1, f1) for i in range(3)]
    net = DirectField(TINY.shape)
    before = params(net)
    _, log = run_finetune(net, pairs, TrainConfig(epochs=1))
    floor = 0.025118864315095794 * 1.705
    assert all(abs(s.loss_total - floor) < 1e-9 for s in log.steps)
    assert torch.linalg.norm(params(net) - before) < 1e-6


def test_plain_gd_loss_decreases():
    pairs = make_pairs("uniform_strain", 10, 0, grid=TINY)
    net = DirectField(TINY.shape)
    _, log = run_finetune(net, pairs, TrainConfig(learning_rate=10.0, epochs=5, optimizer="plain_gd"))
    means = [e["mean_loss"] for e in log.epochs]
    assert all(b < a for a, b in zip(means, means[1:]))


def test_order_is_stable_under_insertion():
    pairs = make_pairs("uniform_strain", 4, 0, grid=TINY)
    extra = Pair("zz", pairs[0].frame1, pairs[0].frame2)
    for epoch in range(3):
        a = [p.pair_id for p in _order(pairs, 5, epoch)]
        b = [p.pair_id for p in _order(pairs + [extra], 5, epoch) if p.pair_id != "zz"]
        assert a == b


def test_all_rejected_aborts_with_log():
    pairs = make_pairs("uniform_strain", 2, 0, grid=TINY)
    net = TinyPyramidNet(head_scale=1.0, seed=0)
    cfg = TrainConfig(epochs=2, loss=LossConfig(alpha=1e-9))
    with pytest.raises(TrainingAborted, match="epoch 0") as info:
        run_finetune(net, pairs, cfg)
    assert len(info.value.log.steps) == 2 and not info.value.log.accepted_steps()
    with pytest.raises(TrainingAborted, match="empty"):
        run_finetune(net, [], cfg)
    with pytest.raises(TrainingAborted, match="unique"):
        run_finetune(net, pairs + pairs[:1], cfg)


def test_manifest_checkpoints_and_log(tmp_path):
    pairs = make_pairs("uniform_strain", 2, 0, grid=TINY)
    entries = []
    for p in pairs:
        write_rfd(tmp_path / f"{p.pair_id}a.rfd", p.frame1)
        write_rfd(tmp_path / f"{p.pair_id}b.rfd", p.frame2)
        write_flow(tmp_path / f"{p.pair_id}.gt", p.truth.axial, p.truth.lateral)
        entries.append({"id": p.pair_id, "frame1": f"{p.pair_id}a.rfd",
                        "frame2": f"{p.pair_id}b.rfd", "truth": f"{p.pair_id}.gt"})
    (tmp_path / "m.json").write_text(json.dumps({"pairs": entries}))
    loaded = load_manifest(tmp_path / "m.json")
    assert [p.pair_id for p in loaded] == [p.pair_id for p in pairs]
    np.testing.assert_allclose(loaded[0].truth.axial, pairs[0].truth.axial, atol=1e-5)
    out = tmp_path / "run"
    out.mkdir()
    net, log = run_finetune(DirectField(TINY.shape), tmp_path / "m.json",
                            TrainConfig(epochs=2, learning_rate=1e-2), out_dir=out)
    assert (out / "checkpoint_epoch000.json").exists() and (out / "checkpoint_epoch001.bin").exists()
    log.write_csv(out / "log.csv")
    rows = list(csv.DictReader((out / "log.csv").open()))
    assert len(rows) == 4
    assert list(rows[0])[:7] == ["step", "loss_total", "loss_d", "loss_s1", "loss_s2",
                                 "inlier_fraction", "frame_accepted"]
    r = rows[0]
    assert float(r["loss_total"]) == pytest.approx(
        float(r["loss_d"]) + float(r["loss_s1"]) + float(r["loss_s2"]), rel=1e-12)


def test_pretraining_reduces_error():
    pairs = make_pairs("uniform_strain", 2, 7, grid=TINY)
    hist = pretrain_supervised(TinyPyramidNet(seed=0), pairs, epochs=6, learning_rate=1e-3)
    assert hist[-1] < hist[0]
    with pytest.raises(ValueError, match="ground truth"):
        pretrain_supervised(TinyPyramidNet(), [Pair("x", pairs[0].frame1, pairs[0].frame2)], 1)


def test_direct_solve_identical_frames():
    f1, _, _ = simulate_pair(GroundTruthDeformation.zero(), 3, SMALL)
    flow = run_direct_solve((f1, f1))
    assert max(np.abs(flow.axial).max(), np.abs(flow.lateral).max()) < 0.05


def test_direct_solve_integer_shift():
    shift = np.zeros((2, *SMALL.shape))
    shift[0] = 3.0
    f1, f2, _ = simulate_pair(GroundTruthDeformation("custom_grid", grid=shift), 4, SMALL)
    flow = run_direct_solve((f1, f2))
    med = np.median(flow.numpy()[0][20:-20, 8:-8])
    assert 2.9 <= med <= 3.1


def test_direct_solve_divergence_guard():
    p = make_pairs("uniform_strain", 1, 0, grid=TINY)[0]
    cfg = DirectSolveConfig(levels=((1, 1),), learning_rate=5.0, iterations=20, divergence_factor=1.0)
    with pytest.raises(SolveDiverged):
        run_direct_solve(p, cfg)


@pytest.mark.xfail(strict=True, reason=(
    "the small pretrained net predicts near-zero lateral flow and roughly antisymmetric "
    "axial flow on unrelated frames, so about half the pixels pass the 1 px check "
    "(measured 0.46-0.56 over ten seed pairs)"))
def test_injected_decorrelated_pair_is_skipped(pretrained_state):
    """A pair of unrelated speckle frames fails the consistency check and
    leaves the trajectory of the other pairs untouched."""
    pairs = make_pairs("inclusion", 3, 0)
    a, _, _ = simulate_pair(GroundTruthDeformation.zero(), 500, SMALL)
    b, _, _ = simulate_pair(GroundTruthDeformation.zero(), 900, SMALL)
    junk = Pair("junk", a, b)
    cfg = TrainConfig(learning_rate=1e-3, epochs=3)
    clean_net, clean_log = run_finetune(pretrained_net(pretrained_state), pairs, cfg)
    dirty_net, dirty_log = run_finetune(pretrained_net(pretrained_state), pairs + [junk], cfg)
    junk_steps = [s for s in dirty_log.steps if s.pair_id == "junk"]
    assert len(junk_steps) == 3 and not any(s.accepted for s in junk_steps)
    kept = [s.key()[2:] for s in dirty_log.steps if s.pair_id != "junk"]
    assert kept == [s.key()[2:] for s in clean_log.steps]
    assert torch.equal(params(clean_net), params(dirty_net))
