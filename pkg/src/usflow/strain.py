"""Axial strain from displacement, and CNR / strain-ratio evaluation."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "StrainMap",
    "WindowPair",
    "MetricEntry",
    "MetricsReport",
    "lsq_strain",
    "cnr_sr",
    "evaluate_windows",
]


@dataclass(frozen=True)
class StrainMap:
    values: np.ndarray
    window_len: int

    @property
    def shape(self):
        return self.values.shape


def _slope_over(w: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Least-squares slope of rows ``lo..hi-1`` of ``w``, one value per column."""
    k = np.arange(lo, hi, dtype=np.float64)
    k = k - k.mean()
    return k @ w[lo:hi] / (k @ k)


def lsq_strain(w_a, window_len: int = 43) -> StrainMap:
    """Slope of a least-squares line through a centered axial window.

    ``window_len`` must be odd, at least 3 and no longer than the axial
    extent. Pixels closer than half a window to the top or bottom use the
    truncated window. Strain is reported as ``+d(w_a)/d(axial)``.
    """
    w = np.asarray(w_a, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError(f"axial displacement must be 2D, got shape {w.shape}")
    n = w.shape[0]
    if window_len < 3 or window_len % 2 == 0:
        raise ValueError(f"window_len must be odd and >= 3, got {window_len}")
    if window_len > n:
        raise ValueError(f"window_len {window_len} exceeds axial extent {n}")
    half = window_len // 2
    j = np.arange(-half, half + 1, dtype=np.float64)
    out = correlate1d(w, j / (j @ j), axis=0, mode="nearest")
    for i in range(min(half, n)):
        out[i] = _slope_over(w, 0, min(n, i + half + 1))
        out[n - 1 - i] = _slope_over(w, max(0, n - 1 - i - half), n)
    return StrainMap(out, window_len)


@dataclass(frozen=True)
class WindowPair:
    """Target and background rectangles as half-open pixel ranges.

    Each rectangle is ``((axial_start, axial_stop), (lateral_start, lateral_stop))``.
    """

    target: tuple
    background: tuple
    label: str = ""

    def validate(self, shape) -> None:
        for name, rect in (("target", self.target), ("background", self.background)):
            (a0, a1), (l0, l1) = rect
            if not (0 <= a0 < a1 <= shape[0] and 0 <= l0 < l1 <= shape[1]):
                raise ValueError(f"{self.label or 'window'} {name} {rect} outside image {shape}")

    @property
    def overlaps(self) -> bool:
        (ta, tl), (ba, bl) = self.target, self.background
        return ta[0] < ba[1] and ba[0] < ta[1] and tl[0] < bl[1] and bl[0] < tl[1]

    @classmethod
    def from_dict(cls, d: dict) -> "WindowPair":
        unknown = set(d) - {"target", "background", "label"}
        if unknown:
            raise ValueError(f"unknown window keys {sorted(unknown)}")
        def rect(r):
            return tuple(tuple(int(v) for v in side) for side in r)
        return cls(rect(d["target"]), rect(d["background"]), str(d.get("label", "")))


@dataclass
class MetricEntry:
    label: str
    mean_target: float
    mean_background: float
    var_target: float
    var_background: float
    sr: float | None
    cnr: float
    overlap: bool = False


def _pop_var(x: np.ndarray) -> float:
    # a constant window is exactly zero, not the rounding residue of its mean
    return 0.0 if np.ptp(x) == 0 else float(x.var())


def cnr_sr(strain, windows: WindowPair) -> MetricEntry:
    """Strain ratio and contrast-to-noise ratio for one target/background pair.

    Variances are population variances. ``sr`` is ``None`` when the
    background mean is zero; ``cnr`` is ``inf`` when both variances vanish
    but the means differ.
    """
    values = strain.values if isinstance(strain, StrainMap) else np.asarray(strain, dtype=np.float64)
    windows.validate(values.shape)

    def crop(rect):
        (a0, a1), (l0, l1) = rect
        return values[a0:a1, l0:l1]

    t, b = crop(windows.target), crop(windows.background)
    s_t, s_b = float(t.mean()), float(b.mean())
    v_t, v_b = _pop_var(t), _pop_var(b)
    sr = s_t / s_b if s_b != 0 else None
    num = 2 * (s_b - s_t) ** 2
    den = v_b + v_t
    if den > 0:
        cnr = math.sqrt(num / den)
    else:
        cnr = math.inf if num > 0 else 0.0
    return MetricEntry(windows.label, s_t, s_b, v_t, v_b, sr, cnr, windows.overlaps)


@dataclass
class MetricsReport:
    entries: list = field(default_factory=list)

    def to_json(self) -> str:
        def clean(entry):
            d = asdict(entry)
            if d["cnr"] == math.inf:
                d["cnr"] = "inf"
            return d
        return json.dumps({"windows": [clean(e) for e in self.entries]}, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        names = list(MetricEntry.__dataclass_fields__)
        writer = csv.DictWriter(buf, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for e in self.entries:
            row = asdict(e)
            row["sr"] = "nan" if row["sr"] is None else repr(row["sr"])
            row["cnr"] = repr(row["cnr"])
            writer.writerow(row)
        return buf.getvalue()


def evaluate_windows(strain, windows) -> MetricsReport:
    return MetricsReport([cnr_sr(strain, w) for w in windows])
