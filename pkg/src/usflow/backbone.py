"""Displacement estimators that plug into the unsupervised loss.

Two backbones share one interface:

* ``TinyPyramidNet`` - a small coarse-to-fine CNN. A shared feature
  pyramid is built for both frames; the coarsest level regresses a flow,
  and each finer level warps the second frame's features by the upsampled
  flow and predicts a residual. Only the full-resolution output is meant
  to receive a loss; the coarser flows are returned for inspection.
* ``DirectField`` - the displacement field itself is the parameter set,
  stored on a coarse control grid and upsampled bilinearly. Its estimate
  ignores the images.

Everything runs in float64 on CPU by default.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.utils.checkpoint import checkpoint

from .loss import stack_tensor
from .warp import DisplacementField, as_tensor, warp_flow, warp_image

__all__ = [
    "FlowBackbone",
    "TinyPyramidNet",
    "DirectField",
    "estimate",
    "estimate_bidirectional",
    "invert_flow",
    "save_checkpoint",
    "load_checkpoint",
    "import_pretrained",
]


class FlowBackbone(nn.Module):
    """Common surface: ``flow(x1, x2)`` on ``(3, H, W)`` tensors."""

    name = "backbone"

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed

    @property
    def descriptor(self) -> dict:
        return {"name": self.name, "seed": self.seed, **self.hyperparameters()}

    def hyperparameters(self) -> dict:
        return {}

    def flow(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def flow_reverse(self, x1: torch.Tensor, x2: torch.Tensor) -> torch.Tensor:
        """Flow from frame 2 back to frame 1; by default the same estimator with swapped inputs."""
        return self.flow(x2, x1)

    def parameter_vector(self) -> torch.Tensor:
        params = [p.detach().reshape(-1) for p in self.parameters()]
        return torch.cat(params) if params else torch.zeros(0, dtype=torch.float64)

    def estimate(self, stack1, stack2) -> DisplacementField:
        flow = self.flow(stack_tensor(stack1), stack_tensor(stack2))
        return DisplacementField.from_tensor(flow, "forward")


def estimate(backbone: FlowBackbone, stack1, stack2) -> DisplacementField:
    """Dense forward flow, frame 1 to frame 2, at full resolution."""
    return backbone.estimate(stack1, stack2)


def estimate_bidirectional(backbone: FlowBackbone, stack1, stack2,
                           freeze_backward: bool = True) -> tuple[torch.Tensor, torch.Tensor]:
    """Return ``(w_f, w_b)`` as ``(2, H, W)`` tensors.

    With ``freeze_backward`` the backward flow is computed without autograd
    tracking, so it is a constant for every downstream gradient.
    """
    x1, x2 = stack_tensor(stack1), stack_tensor(stack2)
    w_f = backbone.flow(x1, x2)
    if freeze_backward:
        with torch.no_grad():
            w_b = backbone.flow_reverse(x1, x2)
    else:
        w_b = backbone.flow_reverse(x1, x2)
    return w_f, w_b


def invert_flow(w_f: torch.Tensor, iterations: int = 20, tol: float = 1e-6) -> torch.Tensor:
    """Backward flow consistent with ``w_f`` by fixed-point iteration.

    Solves ``w_b(y) = -w_f(y + w_b(y))``; the iteration contracts when the
    flow gradient stays well below one, which holds for elastography
    strains. Stops once no pixel moves by more than ``tol``.
    """
    w_b = -w_f
    for _ in range(iterations):
        nxt = -warp_flow(w_f, w_b).tensor()
        done = float((nxt - w_b).abs().max()) <= tol
        w_b = nxt
        if done:
            break
    return w_b


def _interp_matrix(n_out: int, n_ctrl: int, spacing: int, dtype) -> torch.Tensor:
    pos = torch.arange(n_out, dtype=dtype) / spacing
    i0 = pos.floor().clamp(max=n_ctrl - 2).long() if n_ctrl > 1 else torch.zeros(n_out, dtype=torch.long)
    frac = pos - i0.to(dtype)
    m = torch.zeros(n_out, n_ctrl, dtype=dtype)
    rows = torch.arange(n_out)
    m[rows, i0] = 1 - frac
    if n_ctrl > 1:
        m[rows, i0 + 1] += frac
    return m


class DirectField(FlowBackbone):
    """Displacement parameters on a control grid with ``spacing`` pixel pitch.

    The backward flow is the numerical inverse of the forward field, so a
    single parameter set describes both directions the way one network's
    weights do.
    """

    name = "direct_field"

    def __init__(self, shape, spacing: int = 8, seed: int = 0, dtype=torch.float64, init=None):
        super().__init__(seed)
        self.shape = (int(shape[0]), int(shape[1]))
        self.spacing = int(spacing)
        if self.spacing < 1:
            raise ValueError("control-grid spacing must be >= 1")
        h, w = self.shape
        hc = math.ceil((h - 1) / self.spacing) + 1
        wc = math.ceil((w - 1) / self.spacing) + 1
        self.register_buffer("_ma", _interp_matrix(h, hc, self.spacing, dtype), persistent=False)
        self.register_buffer("_ml", _interp_matrix(w, wc, self.spacing, dtype), persistent=False)
        self.control = nn.Parameter(torch.zeros(2, hc, wc, dtype=dtype))
        if init is not None:
            self.set_uniform(*init)

    def hyperparameters(self) -> dict:
        return {"shape": list(self.shape), "spacing": self.spacing}

    @torch.no_grad()
    def set_uniform(self, axial: float, lateral: float) -> None:
        self.control[0].fill_(axial)
        self.control[1].fill_(lateral)

    @torch.no_grad()
    def set_from_flow(self, flow) -> None:
        """Least-squares fit of control values to a dense ``(2, H, W)`` flow."""
        f = as_tensor(flow, self.control.dtype)
        pa = torch.linalg.pinv(self._ma)
        pl = torch.linalg.pinv(self._ml)
        self.control.copy_(pa @ f @ pl.T)

    def dense(self) -> torch.Tensor:
        return self._ma @ self.control @ self._ml.T

    def _check(self, x1: torch.Tensor):
        if tuple(x1.shape[-2:]) != self.shape:
            raise ValueError(f"DirectField built for {self.shape}, got input {tuple(x1.shape[-2:])}")

    def flow(self, x1, x2):
        self._check(x1)
        return self.dense()

    def flow_reverse(self, x1, x2):
        self._check(x1)
        return invert_flow(self.dense())


def _conv(cin, cout, stride=1):
    return nn.Conv2d(cin, cout, 3, stride=stride, padding=1)


class TinyPyramidNet(FlowBackbone):
    """Coarse-to-fine flow CNN with ``levels`` pyramid levels.

    ``features[k]`` is the channel count at level ``k`` (level 0 is full
    resolution). Each estimator block is two 3x3 convolutions with
    ``hidden`` channels in between. ``head_scale`` scales the initial
    weights of the flow-output convolutions; 0 makes the initial flow
    exactly zero everywhere.
    """

    name = "tiny_pyramid"

    def __init__(self, levels: int = 3, features=(8, 16, 32), hidden: int = 16,
                 seed: int = 0, head_scale: float = 0.0, dtype=torch.float64):
        super().__init__(seed)
        if levels < 2:
            raise ValueError("TinyPyramidNet needs at least 2 levels")
        features = tuple(int(f) for f in features)
        if len(features) != levels:
            raise ValueError(f"need {levels} feature widths, got {len(features)}")
        self.levels = levels
        self.features = features
        self.hidden = int(hidden)
        self.head_scale = float(head_scale)
        self.recompute = False

        self.encoders = nn.ModuleList()
        cin = 3
        for k, f in enumerate(features):
            stride = 1 if k == 0 else 2
            self.encoders.append(nn.Sequential(_conv(cin, f, stride), nn.LeakyReLU(0.1),
                                               _conv(f, f), nn.LeakyReLU(0.1)))
            cin = f
        self.estimators = nn.ModuleList()
        for k, f in enumerate(features):
            extra = 0 if k == levels - 1 else 2
            self.estimators.append(nn.Sequential(_conv(2 * f + extra, self.hidden), nn.LeakyReLU(0.1),
                                                 _conv(self.hidden, 2)))
        self._init_weights(dtype)

    def hyperparameters(self) -> dict:
        return {"levels": self.levels, "features": list(self.features), "hidden": self.hidden,
                "head_scale": self.head_scale}

    @torch.no_grad()
    def _init_weights(self, dtype):
        gen = torch.Generator().manual_seed(self.seed)
        self.to(dtype)
        heads = {id(est[-1]) for est in self.estimators}
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * m.kernel_size[0] * m.kernel_size[1]
                std = math.sqrt(2.0 / fan_in)
                if id(m) in heads:
                    std *= self.head_scale
                m.weight.copy_(torch.randn(m.weight.shape, generator=gen, dtype=dtype) * std)
                m.bias.zero_()

    @property
    def multiple(self) -> int:
        return 2 ** (self.levels - 1)

    def _pyramid(self, x):
        feats = []
        for enc in self.encoders:
            x = enc(x)
            feats.append(x)
        return feats

    def _run(self, fn, *args):
        if self.recompute and torch.is_grad_enabled():
            return checkpoint(fn, *args, use_reentrant=False)
        return fn(*args)

    def _refine(self, k, f1, f2, flow_up):
        warped = warp_image(f2[0], flow_up)[None]
        inp = torch.cat([f1, warped, flow_up[None]], 1)
        return flow_up + self.estimators[k](inp)[0]

    def pyramid_flows(self, x1: torch.Tensor, x2: torch.Tensor, pad: bool = True) -> list:
        """All pyramid flows, coarsest first; the last entry is full resolution."""
        h, w = x1.shape[-2:]
        m = self.multiple
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            if not pad:
                raise ValueError(f"input {h}x{w} must be padded by ({ph}, {pw}) to a multiple of {m}")
            x1 = F.pad(x1[None], (0, pw, 0, ph), mode="reflect")[0]
            x2 = F.pad(x2[None], (0, pw, 0, ph), mode="reflect")[0]
        f1 = self._run(self._pyramid, x1[None])
        f2 = self._run(self._pyramid, x2[None])
        top = self.levels - 1
        flow = self._run(lambda a, b: self.estimators[top](torch.cat([a, b], 1))[0], f1[top], f2[top])
        flows = [flow]
        for k in range(top - 1, -1, -1):
            size = f1[k].shape[-2:]
            flow_up = 2 * F.interpolate(flow[None], size=size, mode="bilinear", align_corners=False)[0]
            flow = self._run(self._refine, k, f1[k], f2[k], flow_up)
            flows.append(flow)
        flows[-1] = flows[-1][:, :h, :w]
        return flows

    def flow(self, x1, x2):
        return self.pyramid_flows(x1, x2)[-1]


_REGISTRY = {"direct_field": DirectField, "tiny_pyramid": TinyPyramidNet}


def build_backbone(descriptor: dict) -> FlowBackbone:
    d = dict(descriptor)
    name = d.pop("name")
    if name not in _REGISTRY:
        raise ValueError(f"unknown backbone {name!r}; known: {sorted(_REGISTRY)}")
    if name == "tiny_pyramid" and "features" in d:
        d["features"] = tuple(d["features"])
    return _REGISTRY[name](**d)


def save_checkpoint(backbone: FlowBackbone, path, step: int = 0) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 LE blob).

    Returns the manifest path.
    """
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    entries, chunks, offset = [], [], 0
    for name, p in backbone.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4").ravel()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "count": arr.size})
        chunks.append(arr)
        offset += arr.size
    blob = path.with_suffix(".bin")
    blob.write_bytes(np.concatenate(chunks).tobytes() if chunks else b"")
    manifest = {"descriptor": backbone.descriptor, "seed": backbone.seed, "step": int(step),
                "dtype": "f32le", "blob": blob.name, "parameters": entries}
    man = path.with_suffix(".json")
    man.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return man


def load_checkpoint(path) -> tuple[FlowBackbone, dict]:
    man_path = Path(path)
    if man_path.suffix != ".json":
        man_path = man_path.with_suffix(".json")
    manifest = json.loads(man_path.read_text())
    if manifest.get("dtype") != "f32le":
        raise ValueError(f"unsupported checkpoint dtype {manifest.get('dtype')!r}")
    backbone = build_backbone(manifest["descriptor"])
    blob = np.frombuffer((man_path.parent / manifest["blob"]).read_bytes(), dtype="<f4")
    params = dict(backbone.named_parameters())
    if set(params) != {e["name"] for e in manifest["parameters"]}:
        raise ValueError("checkpoint parameter names do not match the descriptor")
    with torch.no_grad():
        for e in manifest["parameters"]:
            chunk = blob[e["offset"]:e["offset"] + e["count"]]
            if chunk.size != e["count"]:
                raise ValueError(f"checkpoint blob truncated at {e['name']}")
            p = params[e["name"]]
            p.copy_(torch.from_numpy(chunk.astype(np.float64).reshape(e["shape"])).to(p.dtype))
    return backbone, manifest


def import_pretrained(path, backbone: FlowBackbone):
    """Import external pretrained flow-network weights (not shipped).

    Expected input is a mapping from tensor name to array, following the
    names of ``backbone.named_parameters()``, e.g. ``encoders.0.0.weight``
    for the first full-resolution convolution and ``estimators.2.2.weight``
    for the coarsest flow head. The first encoder convolution must accept
    3 input channels (RF, imaginary analytic part, envelope).
    """
    raise NotImplementedError("pretrained weight import is not part of this release")
