"""Unsupervised fine-tuning loop and the single-pair variational solver."""

from __future__ import annotations

import csv
import json
import logging
import time
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .backbone import (DirectField, FlowBackbone, estimate_bidirectional, invert_flow,
                       save_checkpoint)
from .fileio import read_flow, read_rfd
from .loss import LOG_FIELDS, LossConfig, stack_tensor, total_loss
from .rf import RfFrame, build_channel_stack
from .warp import DisplacementField

__all__ = [
    "Pair",
    "TrainConfig",
    "TrainLog",
    "StepRecord",
    "DirectSolveConfig",
    "TrainingAborted",
    "SolveDiverged",
    "load_manifest",
    "run_finetune",
    "solve_direct_field",
    "run_direct_solve",
    "pretrain_supervised",
    "with_loss",
]

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    """Raised when training cannot proceed; ``log`` holds the steps taken so far."""

    def __init__(self, message: str, log=None):
        super().__init__(message)
        self.log = log


class SolveDiverged(RuntimeError):
    pass


@dataclass
class Pair:
    pair_id: str
    frame1: RfFrame
    frame2: RfFrame
    truth: DisplacementField | None = None
    _stacks: tuple | None = field(default=None, repr=False, compare=False)

    def stacks(self, normalize="unit_std") -> tuple[torch.Tensor, torch.Tensor]:
        if self._stacks is None or self._stacks[0] != normalize:
            s1 = stack_tensor(build_channel_stack(self.frame1, normalize))
            s2 = stack_tensor(build_channel_stack(self.frame2, normalize))
            self._stacks = (normalize, s1, s2)
        return self._stacks[1], self._stacks[2]


def load_manifest(path) -> list[Pair]:
    """Read a pair manifest: ``{"pairs": [{"id", "frame1", "frame2", "truth"?}]}``.

    Relative paths resolve against the manifest's directory.
    """
    path = Path(path)
    doc = json.loads(path.read_text())
    pairs = []
    for entry in doc.get("pairs", []):
        base = path.parent
        truth = None
        if entry.get("truth"):
            axial, lateral = read_flow(base / entry["truth"])
            truth = DisplacementField(axial, lateral, "forward")
        pairs.append(Pair(str(entry["id"]), read_rfd(base / entry["frame1"]),
                          read_rfd(base / entry["frame2"]), truth))
    return pairs


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    epochs: int = 20
    batch_size: int = 1
    seed: int = 0
    optimizer: str = "adaptive_moments"
    recompute_forward: bool = False
    freeze_backward: bool = True
    normalize: str = "unit_std"
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 is supported")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.optimizer not in ("adaptive_moments", "plain_gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    @classmethod
    def paper(cls, **overrides) -> "TrainConfig":
        """Hyperparameters as published for fine-tuning a pretrained large network."""
        return cls(**{"learning_rate": 4e-7, "epochs": 20, "batch_size": 1, **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class StepRecord:
    step: int
    epoch: int
    pair_id: str
    accepted: bool
    loss_total: float | None
    loss_d: float | None
    loss_s1: float | None
    loss_s2: float | None
    inlier_fraction: float
    grad_norm: float | None
    wall_time: float

    def key(self) -> tuple:
        """Everything except wall-clock time, for reproducibility checks."""
        d = asdict(self)
        d.pop("wall_time")
        return tuple(d.values())


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def accepted_steps(self) -> list:
        return [s for s in self.steps if s.accepted]

    def write_csv(self, path) -> None:
        extra = ("epoch", "pair_id", "grad_norm", "wall_time")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS + extra)
            writer.writeheader()
            for s in self.steps:
                row = asdict(s)
                row["frame_accepted"] = int(row.pop("accepted"))
                writer.writerow({k: ("" if row[k] is None else row[k]) for k in LOG_FIELDS + extra})


def _order(pairs, seed: int, epoch: int):
    # per-pair keys: adding or removing one pair leaves the others' relative order intact
    def key(p):
        rng = np.random.default_rng([seed, epoch, zlib.crc32(p.pair_id.encode())])
        return (rng.random(), p.pair_id)
    return sorted(pairs, key=key)


def _make_optimizer(params, cfg: TrainConfig):
    if cfg.optimizer == "adaptive_moments":
        return torch.optim.Adam(params, lr=cfg.learning_rate)
    return torch.optim.SGD(params, lr=cfg.learning_rate)


def run_finetune(backbone: FlowBackbone, pairs, cfg: TrainConfig = TrainConfig(),
                 out_dir=None, on_epoch=None) -> tuple[FlowBackbone, TrainLog]:
    """Fine-tune ``backbone`` in place on unlabeled pairs.

    ``pairs`` is a list of :class:`Pair` or a manifest path. Each step
    estimates both flows (backward branch frozen by default), builds the
    outlier mask and either skips the pair as rejected or takes one
    optimizer step on the total loss. When ``out_dir`` is given a
    checkpoint is written after every epoch.
    """
    if not isinstance(pairs, (list, tuple)):
        pairs = load_manifest(pairs)
    if not pairs:
        raise TrainingAborted("empty dataset manifest")
    ids = [p.pair_id for p in pairs]
    if len(set(ids)) != len(ids):
        raise TrainingAborted("pair ids must be unique")
    if hasattr(backbone, "recompute"):
        backbone.recompute = cfg.recompute_forward
    params = [p for p in backbone.parameters() if p.requires_grad]
    opt = _make_optimizer(params, cfg)
    train_log = TrainLog()
    step = 0
    for epoch in range(cfg.epochs):
        losses, rejected = [], 0
        for pair in _order(pairs, cfg.seed, epoch):
            t0 = time.perf_counter()
            s1, s2 = pair.stacks(cfg.normalize)
            opt.zero_grad(set_to_none=True)
            w_f, w_b = estimate_bidirectional(backbone, s1, s2, cfg.freeze_backward)
            res = total_loss(s1, s2, w_f, w_b, cfg.loss)
            if not res.accepted:
                rejected += 1
                train_log.steps.append(StepRecord(step, epoch, pair.pair_id, False, None, None,
                                                  None, None, res.mask.inlier_fraction, None,
                                                  time.perf_counter() - t0))
                log.info("step %d: pair %s rejected (inliers %.3f)", step, pair.pair_id,
                         res.mask.inlier_fraction)
                step += 1
                continue
            res.total.backward()
            grad_norm = float(torch.sqrt(sum((p.grad ** 2).sum() for p in params if p.grad is not None)))
            opt.step()
            terms = {k: v.item() for k, v in res.terms.items()}
            losses.append(res.total.item())
            train_log.steps.append(StepRecord(step, epoch, pair.pair_id, True, res.total.item(),
                                              terms["loss_d"], terms["loss_s1"], terms["loss_s2"],
                                              res.mask.inlier_fraction, grad_norm,
                                              time.perf_counter() - t0))
            step += 1
        if not losses:
            raise TrainingAborted(f"every pair was rejected in epoch {epoch}; dataset unusable",
                                  train_log)
        summary = {"epoch": epoch, "mean_loss": float(np.mean(losses)),
                   "accepted": len(losses), "rejected": rejected}
        train_log.epochs.append(summary)
        log.info("epoch %d: mean loss %.6f, %d accepted, %d rejected", epoch,
                 summary["mean_loss"], len(losses), rejected)
        if out_dir is not None:
            save_checkpoint(backbone, Path(out_dir) / f"checkpoint_epoch{epoch:03d}", step=step)
        if on_epoch is not None:
            on_epoch(epoch, backbone, summary)
    return backbone, train_log


@dataclass(frozen=True)
class DirectSolveConfig:
    """Coarse-to-fine schedule for the single-pair variational solve.

    ``levels`` lists ``(axial_factor, lateral_factor)`` downsampling steps,
    coarsest first; the stacks are average-pooled by those factors and
    the field found at one level seeds the next.
    """

    levels: tuple = ((16, 2), (8, 2), (4, 1), (2, 1), (1, 1))
    iterations: int = 150
    learning_rate: float = 0.05
    spacing: int = 8
    grad_tol: float = 1e-7
    divergence_factor: float = 10.0
    normalize: str = "unit_std"
    loss: LossConfig = field(default_factory=LossConfig)

    def to_dict(self) -> dict:
        return asdict(self)


def _pair_stacks(pair, normalize):
    if isinstance(pair, Pair):
        return pair.stacks(normalize)
    a, b = pair
    if isinstance(a, RfFrame):
        return (stack_tensor(build_channel_stack(a, normalize)),
                stack_tensor(build_channel_stack(b, normalize)))
    return stack_tensor(a), stack_tensor(b)


def _resize_flow(flow: torch.Tensor, size, scale_a: float, scale_l: float) -> torch.Tensor:
    out = F.interpolate(flow[None], size=tuple(size), mode="bilinear", align_corners=False)[0]
    return torch.stack([out[0] * scale_a, out[1] * scale_l])


def solve_direct_field(pair, cfg: DirectSolveConfig = DirectSolveConfig()) -> DirectField:
    """Minimize the total loss over a DirectField for one pair.

    ``pair`` is a :class:`Pair`, a tuple of RfFrames, or a tuple of
    ``(3, H, W)`` stacks. Returns the full-resolution DirectField.
    """
    s1, s2 = _pair_stacks(pair, cfg.normalize)
    shape = tuple(s1.shape[-2:])
    flow = torch.zeros(2, *shape, dtype=torch.float64)
    field_ = None
    for fa, fl in cfg.levels:
        a = F.avg_pool2d(s1[None], (fa, fl))[0] if (fa, fl) != (1, 1) else s1
        b = F.avg_pool2d(s2[None], (fa, fl))[0] if (fa, fl) != (1, 1) else s2
        size = a.shape[-2:]
        field_ = DirectField(size, spacing=cfg.spacing)
        field_.set_from_flow(_resize_flow(flow, size, 1 / fa, 1 / fl))
        opt = torch.optim.Adam(field_.parameters(), lr=cfg.learning_rate)
        initial = None
        for it in range(cfg.iterations):
            opt.zero_grad(set_to_none=True)
            w_f, w_b = estimate_bidirectional(field_, a, b)
            res = total_loss(a, b, w_f, w_b, cfg.loss)
            if not res.accepted:
                log.warning("level %s: mask rejected the pair at iteration %d (inliers %.3f)",
                            (fa, fl), it, res.mask.inlier_fraction)
                break
            value = res.total.item()
            if initial is None:
                initial = value
            elif value > cfg.divergence_factor * initial:
                raise SolveDiverged(f"loss {value:.4g} exceeds {cfg.divergence_factor}x "
                                    f"initial {initial:.4g} at level {(fa, fl)}")
            res.total.backward()
            if float(field_.control.grad.abs().max()) < cfg.grad_tol:
                break
            opt.step()
        flow = _resize_flow(field_.dense().detach(), shape, fa, fl)
    if field_.shape != shape:
        field_ = DirectField(shape, spacing=cfg.spacing)
        field_.set_from_flow(flow)
    return field_


def run_direct_solve(pair, cfg: DirectSolveConfig = DirectSolveConfig()) -> DisplacementField:
    field_ = solve_direct_field(pair, cfg)
    flow = field_.dense().detach().numpy()
    return DisplacementField(flow[0], flow[1], "forward")


def pretrain_supervised(net, pairs, epochs: int = 60, learning_rate: float = 1e-3,
                        seed: int = 0, swap: bool = True, coarse_weight: float = 0.5):
    """Supervised pretraining on pairs with known displacement.

    Plays the role of the labelled pretraining that precedes unsupervised
    fine-tuning. The loss is the mean endpoint error of every pyramid
    output against the average-pooled ground truth (coarse levels weighted
    by ``coarse_weight``). With ``swap`` each pair is also used in reverse,
    labelled with the inverted ground truth, so the network sees the
    backward direction it will be asked for during fine-tuning.
    Returns the per-epoch mean full-resolution endpoint error.
    """
    samples = []
    for p in pairs:
        if p.truth is None:
            raise ValueError(f"pair {p.pair_id} has no ground truth")
        s1, s2 = p.stacks()
        g = p.truth.tensor()
        samples.append((s1, s2, g))
        if swap:
            samples.append((s2, s1, invert_flow(g)))
    opt = torch.optim.Adam(net.parameters(), lr=learning_rate)
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        errors = []
        for i in rng.permutation(len(samples)):
            s1, s2, g = samples[i]
            flows = net.pyramid_flows(s1, s2)
            loss = 0.0
            for k, f in enumerate(flows):
                factor = 2 ** (len(flows) - 1 - k)
                if factor > 1:
                    target = F.avg_pool2d(g[None], factor, ceil_mode=True)[0] / factor
                    target = target[:, :f.shape[1], :f.shape[2]]
                    weight = coarse_weight
                else:
                    target, weight = g, 1.0
                epe = torch.sqrt(((f - target) ** 2).sum(0) + 1e-12)
                loss = loss + weight * epe.mean()
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            errors.append(float((flows[-1].detach() - g).pow(2).sum(0).sqrt().mean()))
        history.append(float(np.mean(errors)))
        log.info("pretrain epoch %d: endpoint error %.4f px", epoch, history[-1])
    return history


def with_loss(cfg, **loss_overrides):
    """Copy of a config with some LossConfig fields replaced."""
    return replace(cfg, loss=replace(cfg.loss, **loss_overrides))
