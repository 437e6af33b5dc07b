"""RF frame container and the three-channel input representation.

The network input is built from one RF frame as three planes: the RF
samples themselves, the imaginary part of the analytic signal, and the
envelope (magnitude of the analytic signal). All transforms run along the
axial direction, i.e. down each column of an ``axial x lateral`` array.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.signal import hilbert

__all__ = [
    "RfFrame",
    "ChannelStack",
    "analytic_signal",
    "envelope",
    "build_channel_stack",
    "bmode_image",
]


@dataclass(frozen=True)
class RfFrame:
    """One RF frame, axial samples along axis 0 and scan lines along axis 1."""

    samples: np.ndarray
    sampling_freq_hz: float
    center_freq_hz: float
    frame_id: Any = None
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 2:
            raise ValueError(f"RF samples must be 2D, got shape {samples.shape}")
        if samples.shape[0] < 2 or samples.shape[1] < 2:
            raise ValueError(f"RF frame needs at least 2x2 samples, got {samples.shape}")
        if not np.all(np.isfinite(samples)):
            bad = int(np.count_nonzero(~np.isfinite(samples)))
            raise ValueError(f"RF frame {self.frame_id!r} has {bad} non-finite samples")
        if not self.sampling_freq_hz > 0 or not self.center_freq_hz > 0:
            raise ValueError("sampling and center frequencies must be positive")
        if not self.sampling_freq_hz > 2 * self.center_freq_hz:
            raise ValueError(
                f"sampling frequency {self.sampling_freq_hz:g} Hz violates Nyquist "
                f"for center frequency {self.center_freq_hz:g} Hz"
            )
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)

    @property
    def shape(self) -> tuple[int, int]:
        return self.samples.shape


@dataclass(frozen=True)
class ChannelStack:
    rf: np.ndarray
    imag_analytic: np.ndarray
    envelope: np.ndarray
    scale: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.rf.shape

    def as_array(self) -> np.ndarray:
        """Return the ``(3, axial, lateral)`` array in channel order rf, imag, envelope."""
        return np.stack([self.rf, self.imag_analytic, self.envelope])


def _samples(frame) -> np.ndarray:
    if isinstance(frame, RfFrame):
        return frame.samples
    x = np.asarray(frame, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("analytic signal requested for non-finite input")
    return x


def analytic_signal(frame: RfFrame | np.ndarray) -> np.ndarray:
    """Analytic signal of every axial line, computed over the full line.

    Real part is the input exactly; imaginary part is the discrete Hilbert
    transform (FFT method, no windowing).
    """
    x = _samples(frame)
    z = hilbert(x, axis=0)
    # the FFT round trip perturbs the real part at the ulp level
    return x + 1j * z.imag


def envelope(frame: RfFrame | np.ndarray) -> np.ndarray:
    return np.abs(analytic_signal(frame))


def build_channel_stack(frame: RfFrame | np.ndarray, normalize: str | None = "unit_std") -> ChannelStack:
    """Stack RF, imaginary analytic part and envelope for one frame.

    ``normalize="unit_std"`` divides all three channels by the standard
    deviation of the RF channel, so ``envelope**2 == rf**2 + imag**2`` still
    holds after scaling. ``None`` leaves amplitudes untouched. An all-zero
    frame is returned unscaled.
    """
    z = analytic_signal(frame)
    rf = z.real
    imag = z.imag
    env = np.abs(z)
    if normalize is None:
        scale = 1.0
    elif normalize == "unit_std":
        std = float(rf.std())
        scale = 1.0 / std if std > 0 else 1.0
    else:
        raise ValueError(f"unknown normalization policy {normalize!r}")
    return ChannelStack(rf * scale, imag * scale, env * scale, scale)


def bmode_image(frame: RfFrame | np.ndarray, dynamic_range_db: float = 50.0) -> np.ndarray:
    """Log-compressed envelope mapped to ``[0, 1]`` for plotting."""
    env = envelope(frame)
    peak = env.max()
    if peak <= 0:
        return np.zeros_like(env)
    db = 20 * np.log10(np.maximum(env / peak, 1e-12))
    return np.clip(1 + db / dynamic_range_db, 0.0, 1.0)
