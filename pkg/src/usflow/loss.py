"""Unsupervised elastography loss: robust data term, outlier mask, smoothness.

total = data + first-order smoothness + second-order axial smoothness,
with every term averaged over the inlier pixels of a forward/backward
consistency mask. The mask is a hard gate: no gradient flows through it,
and a pair whose inlier fraction drops below ``1 - reject_fraction`` is
rejected outright instead of producing a loss.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from .rf import ChannelStack
from .warp import as_tensor, flow_tensor, warp_flow, warp_image

__all__ = [
    "LossConfig",
    "OutlierMask",
    "LossResult",
    "EmptyMaskError",
    "charbonnier",
    "outlier_mask",
    "data_loss",
    "smoothness_first",
    "smoothness_second",
    "total_loss",
    "LOG_FIELDS",
    "stack_tensor",
]

LOG_FIELDS = ("step", "loss_total", "loss_d", "loss_s1", "loss_s2", "inlier_fraction",
              "frame_accepted")


class EmptyMaskError(ValueError):
    """No inlier pixels left to average over."""


@dataclass(frozen=True)
class LossConfig:
    gamma: float = 0.2
    epsilon: float = 1e-8
    alpha: float = 1.0
    lambda1: float = 0.5
    lambda2: float = 0.005
    lambda3: float = 0.2
    reject_fraction: float = 0.5
    mask_mode: str = "warped"

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError(f"gamma must lie in (0, 1], got {self.gamma}")
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if not self.alpha > 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("smoothness weights must be nonnegative")
        if not 0 < self.reject_fraction < 1:
            raise ValueError(f"reject_fraction must lie in (0, 1), got {self.reject_fraction}")
        if self.mask_mode not in ("warped", "literal"):
            raise ValueError(f"mask_mode must be 'warped' or 'literal', got {self.mask_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OutlierMask:
    inlier: torch.Tensor
    inlier_fraction: float
    frame_accepted: bool

    @classmethod
    def from_inlier(cls, inlier, reject_fraction: float = 0.5) -> "OutlierMask":
        inlier = torch.as_tensor(np.asarray(inlier, dtype=bool)) if not isinstance(
            inlier, torch.Tensor) else inlier.bool()
        fraction = float(inlier.double().mean())
        # exactly half inliers is still accepted
        return cls(inlier, fraction, fraction >= 1.0 - reject_fraction)

    @classmethod
    def full(cls, shape) -> "OutlierMask":
        return cls.from_inlier(torch.ones(shape, dtype=torch.bool))


@dataclass
class LossResult:
    total: torch.Tensor | None
    mask: OutlierMask
    terms: dict = field(default_factory=dict)

    @property
    def accepted(self) -> bool:
        return self.total is not None

    def csv_row(self, step: int) -> dict:
        def val(t):
            return t.item() if t is not None else ""
        return {
            "step": step,
            "loss_total": val(self.total),
            "loss_d": val(self.terms.get("loss_d")),
            "loss_s1": val(self.terms.get("loss_s1")),
            "loss_s2": val(self.terms.get("loss_s2")),
            "inlier_fraction": self.mask.inlier_fraction,
            "frame_accepted": int(self.mask.frame_accepted),
        }


def charbonnier(x, cfg: LossConfig = LossConfig()):
    """Generalized Charbonnier penalty ``(x**2 + eps) ** gamma``, elementwise."""
    if isinstance(x, torch.Tensor):
        return (x * x + cfg.epsilon) ** cfg.gamma
    x = np.asarray(x, dtype=np.float64)
    return (x * x + cfg.epsilon) ** cfg.gamma


def stack_tensor(s) -> torch.Tensor:
    if isinstance(s, ChannelStack):
        return torch.as_tensor(s.as_array(), dtype=torch.float64)
    t = as_tensor(s)
    return t if t.ndim == 3 else t.unsqueeze(0)


def _masked_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    count = mask.sum()
    if int(count) == 0:
        return values.sum() * 0.0
    return torch.where(mask, values, torch.zeros((), dtype=values.dtype)).sum() / count


def outlier_mask(w_f, w_b, cfg: LossConfig = LossConfig()) -> OutlierMask:
    """Forward/backward consistency mask.

    A pixel is an inlier when ``|w_f(x) + w_b'(x)| < alpha`` (Euclidean norm
    over the two components) and the forward flow keeps it inside the
    image. ``w_b'`` is the backward flow sampled at ``x + w_f(x)`` in
    ``warped`` mode and ``w_b`` itself in ``literal`` mode.
    """
    with torch.no_grad():
        f = flow_tensor(w_f).detach()
        b = flow_tensor(w_b).detach()
        if f.shape != b.shape:
            raise ValueError(f"flow shapes differ: {tuple(f.shape)} vs {tuple(b.shape)}")
        b_w, outside = warp_flow(b, f, return_oob=True)
        if cfg.mask_mode == "warped":
            b = b_w.tensor()
        diff = torch.sqrt(((f + b) ** 2).sum(0))
        inlier = (diff < cfg.alpha) & ~outside
    return OutlierMask.from_inlier(inlier, cfg.reject_fraction)


def data_loss(stack1, stack2, w_f, mask: OutlierMask, cfg: LossConfig = LossConfig()):
    """Mean over inlier pixels of the channel-averaged penalty of ``I1 - warp(I2, w_f)``."""
    i1, i2 = stack_tensor(stack1), stack_tensor(stack2)
    if i1.shape != i2.shape:
        raise ValueError(f"stack shapes differ: {tuple(i1.shape)} vs {tuple(i2.shape)}")
    if int(mask.inlier.sum()) == 0:
        raise EmptyMaskError("data loss over an empty inlier set; pair unusable")
    warped = warp_image(i2, w_f)
    per_pixel = charbonnier(i1 - warped, cfg).mean(0)
    return _masked_mean(per_pixel, mask.inlier)


def _centered_penalty(d: torch.Tensor, m: torch.Tensor, cfg: LossConfig) -> torch.Tensor:
    return _masked_mean(charbonnier(d - _masked_mean(d, m), cfg), m)


def smoothness_first(w_a, mask: OutlierMask, cfg: LossConfig = LossConfig()):
    """Mean-subtracted first-derivative penalty on the axial displacement.

    Forward differences; the last row (axial) or column (lateral) has no
    forward neighbour and is left out of both the mean and the average.
    """
    w = as_tensor(w_a)
    m = mask.inlier
    d_a = w[1:, :] - w[:-1, :]
    d_l = w[:, 1:] - w[:, :-1]
    return (cfg.lambda1 * _centered_penalty(d_a, m[:-1, :], cfg)
            + cfg.lambda2 * _centered_penalty(d_l, m[:, :-1], cfg))


def smoothness_second(w_a, mask: OutlierMask, cfg: LossConfig = LossConfig()):
    """Penalty on the second axial derivative (central difference) of ``w_a``."""
    w = as_tensor(w_a)
    d2 = w[2:, :] - 2 * w[1:-1, :] + w[:-2, :]
    return cfg.lambda3 * _masked_mean(charbonnier(d2, cfg), mask.inlier[1:-1, :])


def total_loss(stack1, stack2, w_f, w_b, cfg: LossConfig = LossConfig(),
               mask: OutlierMask | None = None) -> LossResult:
    """Full training loss for one pair.

    The mask is computed from detached flows unless one is supplied. A
    rejected pair comes back with ``total=None`` and no terms.
    """
    if mask is None:
        mask = outlier_mask(w_f, w_b, cfg)
    if not mask.frame_accepted or int(mask.inlier.sum()) == 0:
        return LossResult(None, mask)
    f = flow_tensor(w_f)
    terms = {
        "loss_d": data_loss(stack1, stack2, f, mask, cfg),
        "loss_s1": smoothness_first(f[0], mask, cfg),
        "loss_s2": smoothness_second(f[0], mask, cfg),
    }
    total = terms["loss_d"] + terms["loss_s1"] + terms["loss_s2"]
    return LossResult(total, mask, terms)
