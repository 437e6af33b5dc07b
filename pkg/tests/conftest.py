import numpy as np
import pytest
import torch

from usflow.backbone import TinyPyramidNet
from usflow.phantom import GroundTruthDeformation, ImagingGrid, Inclusion, simulate_pair
from usflow.train import Pair, pretrain_supervised

SMALL = ImagingGrid(axial_samples=256, lateral_lines=64)


def make_pairs(kind, n, seed0, grid=SMALL, strain=0.02, **kw):
    pairs = []
    for s in range(n):
        if kind == "inclusion":
            (a0, a1), (l0, l1) = grid.extent_mm
            inc = Inclusion(((a0 + a1) / 2, (l0 + l1) / 2), kw.get("radius_mm", 1.0), 0.5)
            d = GroundTruthDeformation("inclusion", strain, inc)
        else:
            d = GroundTruthDeformation(kind, strain)
        pid = f"{kind[:3]}{seed0 + s}"
        f1, f2, truth = simulate_pair(d, seed=seed0 + s, grid=grid, pair_id=pid)
        pairs.append(Pair(pid, f1, f2, truth))
    return pairs


@pytest.fixture(scope="session")
def pretrained_state():
    """TinyPyramidNet weights after supervised pretraining on labelled phantoms.

    Stands in for a network pretrained on labelled data before it is
    fine-tuned without labels. Takes about three minutes.
    """
    rng = np.random.default_rng(0)
    labelled = []
    for s in range(16):
        strain = float(rng.uniform(0.005, 0.04))
        labelled += make_pairs("uniform_strain", 1, 100 + s, strain=strain)
    net = TinyPyramidNet(seed=0)
    history = pretrain_supervised(net, labelled, epochs=60, learning_rate=1e-3, seed=0)
    assert history[-1] < 0.5 * history[0]
    return {k: v.clone() for k, v in net.state_dict().items()}


def pretrained_net(state):
    net = TinyPyramidNet(seed=0)
    net.load_state_dict(state)
    return net


def pytest_terminal_summary(terminalreporter):
    mod = next((m for name, m in list(__import__("sys").modules.items())
                if name.endswith("test_acceptance") and hasattr(m, "RESULTS")), None)
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        status, title, detail = mod.RESULTS[n]
        terminalreporter.write_line(f"[{status}] #{n} {title}: {detail}")
