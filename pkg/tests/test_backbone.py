import numpy as np
import pytest
import torch

from usflow.backbone import (DirectField, TinyPyramidNet, build_backbone, estimate,
                             estimate_bidirectional, import_pretrained, invert_flow,
                             load_checkpoint, save_checkpoint)
from usflow.warp import warp_flow


def stacks(shape=(32, 16), seed=0):
    r = np.random.default_rng(seed)
    return (torch.as_tensor(r.standard_normal((3, *shape))),
            torch.as_tensor(r.standard_normal((3, *shape))))


def test_direct_field_estimates():
    s1, s2 = stacks()
    f = DirectField((32, 16))
    assert not estimate(f, s1, s2).tensor().any()
    f.set_uniform(1.5, 0.0)
    out = f.estimate(s1, s2)
    assert torch.all(out.tensor()[0] == 1.5) and not out.tensor()[1].any()
    with pytest.raises(ValueError, match="built for"):
        f.flow(*stacks((24, 16)))


def test_direct_field_control_grid():
    f = DirectField((33, 17), spacing=8)
    assert tuple(f.control.shape) == (2, 5, 3)
    a, l = np.meshgrid(np.arange(33.0), np.arange(17.0), indexing="ij")
    target = np.stack([0.02 * a + 0.1 * l, -0.05 * l])
    f.set_from_flow(target)
    # bilinear control interpolation reproduces affine fields
    np.testing.assert_allclose(f.dense().detach().numpy(), target, atol=1e-10)


def test_invert_flow():
    a, _ = np.meshgrid(np.arange(64.0), np.arange(8.0), indexing="ij")
    w = torch.as_tensor(np.stack([0.02 * a, np.zeros_like(a)]))
    inv = invert_flow(w)
    # w_b(x + w_f(x)) = -w_f(x) away from the far edge
    back = warp_flow(inv, w).tensor()
    assert torch.max(torch.abs(back[:, :60] + w[:, :60])) < 1e-5


def test_bidirectional_zero_field():
    s1, _ = stacks()
    w_f, w_b = estimate_bidirectional(DirectField((32, 16)), s1, s1)
    assert not w_f.any() and not w_b.any()


def test_converged_direct_field_is_symmetric():
    # the backward branch of a DirectField inverts its forward field
    f = DirectField((48, 24))
    f.set_uniform(3.0, -1.0)
    s1, s2 = stacks((48, 24))
    w_f, w_b = estimate_bidirectional(f, s1, s2)
    assert torch.median(torch.abs(w_b + w_f)).item() < 0.1


def test_frozen_backward_has_no_graph():
    net = TinyPyramidNet(head_scale=0.1, seed=1)
    s1, s2 = stacks()
    w_f, w_b = estimate_bidirectional(net, s1, s2, freeze_backward=True)
    assert w_f.requires_grad and not w_b.requires_grad
    _, w_b2 = estimate_bidirectional(net, s1, s2, freeze_backward=False)
    assert w_b2.requires_grad
    assert torch.equal(w_b, w_b2.detach())


def test_tiny_net_contracts():
    net = TinyPyramidNet()
    n = sum(p.numel() for p in net.parameters())
    assert n < 500_000
    s1, s2 = stacks((30, 14))
    assert not net.flow(s1, s2).any()  # zero-initialized heads
    assert tuple(net.flow(s1, s2).shape) == (2, 30, 14)
    with pytest.raises(ValueError, match=r"padded by \(2, 2\)"):
        net.pyramid_flows(s1, s2, pad=False)
    a = TinyPyramidNet(seed=4, head_scale=0.5)
    b = TinyPyramidNet(seed=4, head_scale=0.5)
    assert torch.equal(a.flow(s1, s2), b.flow(s1, s2))
    assert torch.equal(a.flow(s1, s2), a.flow(s1, s2))
    assert not torch.equal(a.parameter_vector(), TinyPyramidNet(seed=5, head_scale=0.5).parameter_vector())
    flows = a.pyramid_flows(s1, s2)
    assert [tuple(f.shape[-2:]) for f in flows] == [(8, 4), (16, 8), (30, 14)]


def test_recompute_is_transparent():
    s1, s2 = stacks()
    grads = []
    for recompute in (False, True):
        net = TinyPyramidNet(seed=2, head_scale=0.3)
        net.recompute = recompute
        (net.flow(s1, s2) ** 2).sum().backward()
        grads.append(torch.cat([p.grad.ravel() for p in net.parameters()]))
    assert torch.equal(grads[0], grads[1])


@pytest.mark.parametrize("make", [
    lambda: TinyPyramidNet(seed=3, head_scale=0.2),
    lambda: DirectField((20, 12), spacing=4, init=(0.25, -0.5)),
])
def test_checkpoint_round_trip(tmp_path, make):
    net = make()
    with torch.no_grad():
        for p in net.parameters():
            p.copy_(p.to(torch.float32).to(p.dtype))  # representable in the f32 blob
    man = save_checkpoint(net, tmp_path / "ck", step=7)
    back, manifest = load_checkpoint(man)
    assert manifest["step"] == 7 and manifest["descriptor"] == net.descriptor
    assert torch.equal(back.parameter_vector(), net.parameter_vector())
    save_checkpoint(back, tmp_path / "ck2", step=7)
    assert (tmp_path / "ck.bin").read_bytes() == (tmp_path / "ck2.bin").read_bytes()


def test_checkpoint_truncated_blob(tmp_path):
    save_checkpoint(TinyPyramidNet(), tmp_path / "ck")
    blob = tmp_path / "ck.bin"
    blob.write_bytes(blob.read_bytes()[:-8])
    with pytest.raises(ValueError, match="truncated"):
        load_checkpoint(tmp_path / "ck.json")


def test_registry_and_import():
    assert isinstance(build_backbone({"name": "direct_field", "shape": [8, 8]}), DirectField)
    with pytest.raises(ValueError, match="unknown backbone"):
        build_backbone({"name": "liteflownet"})
    with pytest.raises(NotImplementedError):
        import_pretrained("weights.npz", TinyPyramidNet())
