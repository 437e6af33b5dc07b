"""Bilinear resampling of images and flow fields by a displacement field.

Flows are in pixels, ordered ``(axial, lateral)``. Everything here is
written with torch ops so gradients reach both the image values and the
flow; numpy inputs are accepted and converted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

__all__ = ["DisplacementField", "as_tensor", "flow_tensor", "warp_image", "warp_flow"]


@dataclass
class DisplacementField:
    """Dense 2D displacement in pixels; arrays may be numpy or torch."""

    axial: object
    lateral: object
    direction: str = "forward"

    def __post_init__(self):
        if self.direction not in ("forward", "backward"):
            raise ValueError(f"direction must be 'forward' or 'backward', got {self.direction!r}")
        if tuple(self.axial.shape) != tuple(self.lateral.shape):
            raise ValueError(
                f"axial {tuple(self.axial.shape)} and lateral {tuple(self.lateral.shape)} differ"
            )
        for part in self.numpy():
            if not np.all(np.isfinite(part)):
                raise ValueError("displacement field has non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.axial.shape)

    @classmethod
    def zeros(cls, shape, direction="forward") -> "DisplacementField":
        return cls(np.zeros(shape), np.zeros(shape), direction)

    @classmethod
    def from_tensor(cls, flow: torch.Tensor, direction="forward") -> "DisplacementField":
        return cls(flow[0], flow[1], direction)

    def tensor(self, dtype=torch.float64) -> torch.Tensor:
        return torch.stack([as_tensor(self.axial, dtype), as_tensor(self.lateral, dtype)])

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        def conv(x):
            return x.detach().cpu().numpy() if isinstance(x, torch.Tensor) else np.asarray(x)
        return conv(self.axial), conv(self.lateral)


def as_tensor(x, dtype=torch.float64) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == dtype else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype)


def flow_tensor(flow, dtype=torch.float64) -> torch.Tensor:
    """``(2, H, W)`` tensor from a DisplacementField or array-like."""
    if isinstance(flow, DisplacementField):
        return flow.tensor(dtype)
    t = as_tensor(flow, dtype)
    if t.ndim != 3 or t.shape[0] != 2:
        raise ValueError(f"flow must have shape (2, H, W), got {tuple(t.shape)}")
    return t


def _sample(image: torch.Tensor, flow: torch.Tensor, oob: str):
    h, w = image.shape[-2:]
    if tuple(flow.shape[-2:]) != (h, w):
        raise ValueError(f"flow shape {tuple(flow.shape[-2:])} does not match image {(h, w)}")
    if h < 2 or w < 2:
        raise ValueError("warping needs at least 2x2 pixels")
    grid_a = torch.arange(h, dtype=flow.dtype).view(h, 1)
    grid_l = torch.arange(w, dtype=flow.dtype).view(1, w)
    pos_a = grid_a + flow[0]
    pos_l = grid_l + flow[1]
    outside = (pos_a < 0) | (pos_a > h - 1) | (pos_l < 0) | (pos_l > w - 1)
    pos_a = pos_a.clamp(0, h - 1)
    pos_l = pos_l.clamp(0, w - 1)
    a0 = pos_a.detach().floor().clamp(max=h - 2).long()
    l0 = pos_l.detach().floor().clamp(max=w - 2).long()
    fa = pos_a - a0.to(flow.dtype)
    fl = pos_l - l0.to(flow.dtype)
    flat = image.reshape(*image.shape[:-2], h * w)
    idx00 = (a0 * w + l0).reshape(-1)

    def take(offset):
        return flat[..., idx00 + offset].reshape(image.shape)

    v00, v01, v10, v11 = take(0), take(1), take(w), take(w + 1)
    top = v00 * (1 - fl) + v01 * fl
    bottom = v10 * (1 - fl) + v11 * fl
    out = top * (1 - fa) + bottom * fa
    if oob == "zeros":
        out = torch.where(outside, torch.zeros((), dtype=out.dtype), out)
    elif oob != "clamp":
        raise ValueError(f"unknown out-of-bounds policy {oob!r}")
    return out, outside


def warp_image(image, flow, oob: str = "clamp", return_oob: bool = False):
    """Sample ``image`` at ``x + flow(x)`` with bilinear interpolation.

    ``image`` is ``(H, W)`` or ``(C, H, W)``; the same flow is applied to
    every channel. ``oob="clamp"`` clamps coordinates to the border;
    ``oob="zeros"`` fills out-of-bounds pixels with zero. Returns a torch
    tensor; with ``return_oob`` the boolean out-of-bounds map comes too.
    """
    f = flow_tensor(flow)
    out, outside = _sample(as_tensor(image, f.dtype), f, oob)
    return (out, outside) if return_oob else out


def warp_flow(flow_b, flow_f, return_oob: bool = False):
    """Resample the backward flow at ``x + flow_f(x)`` (frame-1 coordinates)."""
    fb = flow_tensor(flow_b)
    ff = flow_tensor(flow_f)
    if fb.shape != ff.shape:
        raise ValueError(f"flow shapes differ: {tuple(fb.shape)} vs {tuple(ff.shape)}")
    out, outside = _sample(fb, ff, "clamp")
    field = DisplacementField.from_tensor(out, "backward")
    return (field, outside) if return_oob else field
