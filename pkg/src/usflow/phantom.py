"""Synthetic speckle phantom with exact ground-truth displacement.

Point scatterers with Gaussian amplitudes are convolved with a separable
PSF (Gaussian-windowed cosine axially, Gaussian laterally). A deformation
moves the scatterers themselves, and the second frame is rendered from the
moved set, so speckle decorrelates the way real tissue does rather than
being a pure interpolation of frame 1.

Positions are in millimetres; displacements returned to callers are in
pixels (axial samples, lateral lines).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .rf import RfFrame
from .warp import DisplacementField

__all__ = [
    "PsfParams",
    "ImagingGrid",
    "ScattererField",
    "Inclusion",
    "GroundTruthDeformation",
    "generate_scatterers",
    "render_rf",
    "deform_and_render",
    "simulate_pair",
    "speckle_contrast",
]

STRAIN_RANGE = (0.005, 0.05)


@dataclass(frozen=True)
class PsfParams:
    center_freq_hz: float = 5e6
    fractional_bandwidth: float = 0.6
    lateral_sigma_lines: float = 2.0
    truncate: float = 6.0  # support half-width, in envelope sigmas

    @property
    def sigma_t(self) -> float:
        """Time-domain sigma of the pulse envelope, from the -6 dB bandwidth."""
        bw = self.fractional_bandwidth * self.center_freq_hz
        return math.sqrt(2 * math.log(2)) / (math.pi * bw)


@dataclass(frozen=True)
class ImagingGrid:
    axial_samples: int = 1024
    lateral_lines: int = 256
    sampling_freq_hz: float = 40e6
    lateral_pitch_mm: float = 0.1
    sound_speed_m_s: float = 1540.0
    axial_origin_mm: float = 0.0
    lateral_origin_mm: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return (self.axial_samples, self.lateral_lines)

    @property
    def axial_step_mm(self) -> float:
        return self.sound_speed_m_s / (2 * self.sampling_freq_hz) * 1e3

    @property
    def extent_mm(self) -> tuple[tuple[float, float], tuple[float, float]]:
        a0, l0 = self.axial_origin_mm, self.lateral_origin_mm
        return (
            (a0, a0 + (self.axial_samples - 1) * self.axial_step_mm),
            (l0, l0 + (self.lateral_lines - 1) * self.lateral_pitch_mm),
        )

    def to_pixels(self, positions_mm: np.ndarray) -> np.ndarray:
        p = np.asarray(positions_mm, dtype=np.float64).reshape(-1, 2)
        return np.column_stack([
            (p[:, 0] - self.axial_origin_mm) / self.axial_step_mm,
            (p[:, 1] - self.lateral_origin_mm) / self.lateral_pitch_mm,
        ])

    def phantom_extent(self, psf: PsfParams) -> tuple[tuple[float, float], tuple[float, float]]:
        """Grid extent padded by the PSF support so edge pixels see full speckle."""
        (a0, a1), (l0, l1) = self.extent_mm
        pad_a = psf.truncate * psf.sigma_t * self.sampling_freq_hz * self.axial_step_mm
        pad_l = psf.truncate * psf.lateral_sigma_lines * self.lateral_pitch_mm
        return ((a0 - pad_a, a1 + pad_a), (l0 - pad_l, l1 + pad_l))

    def resolution_cell_mm2(self, psf: PsfParams) -> float:
        fwhm = 2 * math.sqrt(2 * math.log(2))
        axial = fwhm * psf.sigma_t * self.sampling_freq_hz * self.axial_step_mm
        lateral = fwhm * psf.lateral_sigma_lines * self.lateral_pitch_mm
        return axial * lateral


@dataclass(frozen=True)
class ScattererField:
    positions: np.ndarray  # (n, 2): axial_mm, lateral_mm
    amplitudes: np.ndarray
    density: float
    extent: tuple[tuple[float, float], tuple[float, float]]
    meta: dict = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.amplitudes)

    @classmethod
    def empty(cls, extent) -> "ScattererField":
        return cls(np.zeros((0, 2)), np.zeros(0), 0.0, extent)

    def moved(self, offsets_mm: np.ndarray) -> "ScattererField":
        return ScattererField(self.positions + offsets_mm, self.amplitudes, self.density,
                              self.extent, dict(self.meta))


@dataclass(frozen=True)
class Inclusion:
    center_mm: tuple[float, float]
    radius_mm: float
    strain_ratio: float = 0.5


@dataclass(frozen=True)
class GroundTruthDeformation:
    """Axial deformation applied to scatterers.

    ``uniform_strain``: axial displacement grows linearly with depth from the
    top of the imaging grid. ``inclusion``: same, but inside a circular
    inclusion the local strain is ``strain_ratio`` times the background.
    ``custom_grid``: a dense ``(2, axial, lateral)`` displacement in pixels,
    sampled bilinearly at scatterer positions.
    """

    kind: str = "uniform_strain"
    axial_strain: float = 0.02
    inclusion: Inclusion | None = None
    grid: np.ndarray | None = None
    strict_range: bool = True

    def __post_init__(self):
        if self.kind not in ("uniform_strain", "inclusion", "custom_grid"):
            raise ValueError(f"unknown deformation kind {self.kind!r}")
        if self.kind == "inclusion" and self.inclusion is None:
            raise ValueError("inclusion deformation needs an Inclusion")
        if self.kind == "custom_grid":
            if self.grid is None or np.asarray(self.grid).ndim != 3:
                raise ValueError("custom_grid deformation needs a (2, axial, lateral) grid")
        elif self.strict_range:
            lo, hi = STRAIN_RANGE
            if not lo <= abs(self.axial_strain) <= hi:
                raise ValueError(
                    f"|axial_strain| = {abs(self.axial_strain):g} outside [{lo}, {hi}]; "
                    "pass strict_range=False to override"
                )

    @classmethod
    def zero(cls) -> "GroundTruthDeformation":
        return cls("uniform_strain", 0.0, strict_range=False)

    def displacement_mm(self, positions_mm: np.ndarray, grid: ImagingGrid) -> np.ndarray:
        """Displacement ``(n, 2)`` in mm at the given ``(n, 2)`` positions."""
        p = np.asarray(positions_mm, dtype=np.float64).reshape(-1, 2)
        out = np.zeros_like(p)
        if self.kind == "custom_grid":
            px = grid.to_pixels(p)
            g = np.asarray(self.grid, dtype=np.float64)
            coords = px.T
            da = map_coordinates(g[0], coords, order=1, mode="nearest")
            dl = map_coordinates(g[1], coords, order=1, mode="nearest")
            out[:, 0] = da * grid.axial_step_mm
            out[:, 1] = dl * grid.lateral_pitch_mm
            return out
        z0 = grid.axial_origin_mm
        depth = p[:, 0] - z0
        if self.kind == "inclusion":
            inc = self.inclusion
            cz, cx = inc.center_mm
            half = np.sqrt(np.maximum(inc.radius_mm ** 2 - (p[:, 1] - cx) ** 2, 0.0))
            lo, hi = cz - half, cz + half
            # signed length of [z0, z] that lies inside the inclusion chord
            inside = np.clip(p[:, 0], lo, hi) - np.clip(z0, lo, hi)
            depth = depth - (1 - inc.strain_ratio) * inside
        out[:, 0] = self.axial_strain * depth
        return out

    def pixel_field(self, grid: ImagingGrid) -> DisplacementField:
        aa, ll = np.meshgrid(np.arange(grid.axial_samples), np.arange(grid.lateral_lines),
                             indexing="ij")
        if self.kind == "uniform_strain":
            # exact on the grid, avoids mm round trip
            return DisplacementField(self.axial_strain * aa.astype(np.float64),
                                     np.zeros(grid.shape), "forward")
        pos = np.column_stack([
            grid.axial_origin_mm + aa.ravel() * grid.axial_step_mm,
            grid.lateral_origin_mm + ll.ravel() * grid.lateral_pitch_mm,
        ])
        d = self.displacement_mm(pos, grid)
        return DisplacementField(
            (d[:, 0] / grid.axial_step_mm).reshape(grid.shape),
            (d[:, 1] / grid.lateral_pitch_mm).reshape(grid.shape),
            "forward",
        )


def generate_scatterers(extent, density: float, seed: int,
                        resolution_cell_mm2: float | None = None) -> ScattererField:
    """Uniformly placed scatterers with i.i.d. standard-normal amplitudes.

    ``extent`` is ``((axial_min, axial_max), (lateral_min, lateral_max))`` in
    mm. The count is ``round(density * area)``. When ``resolution_cell_mm2``
    is given and fewer than 5 scatterers fall in one cell, a warning is
    issued and recorded under ``meta["warnings"]``.
    """
    (a0, a1), (l0, l1) = extent
    if not (a1 > a0 and l1 > l0):
        raise ValueError(f"extent must be positive, got {extent}")
    if not density > 0:
        raise ValueError(f"density must be positive, got {density}")
    area = (a1 - a0) * (l1 - l0)
    n = int(round(density * area))
    rng = np.random.default_rng(seed)
    positions = np.column_stack([rng.uniform(a0, a1, n), rng.uniform(l0, l1, n)])
    amplitudes = rng.standard_normal(n)
    meta: dict = {"seed": seed, "warnings": []}
    if resolution_cell_mm2 is not None:
        per_cell = density * resolution_cell_mm2
        meta["scatterers_per_cell"] = per_cell
        if per_cell < 5:
            msg = f"{per_cell:.2f} scatterers per resolution cell; speckle not fully developed"
            meta["warnings"].append(msg)
            warnings.warn(msg, stacklevel=2)
    return ScattererField(positions, amplitudes, float(density), extent, meta)


def psf_value(d_axial: np.ndarray, d_lateral: np.ndarray, psf: PsfParams,
              grid: ImagingGrid) -> np.ndarray:
    """PSF at offsets given in pixels, truncated at ``psf.truncate`` sigmas."""
    tau = np.asarray(d_axial, dtype=np.float64) / grid.sampling_freq_hz
    s_t = psf.sigma_t
    axial = np.exp(-0.5 * (tau / s_t) ** 2) * np.cos(2 * np.pi * psf.center_freq_hz * tau)
    axial = np.where(np.abs(tau) <= psf.truncate * s_t, axial, 0.0)
    dl = np.asarray(d_lateral, dtype=np.float64)
    s_l = psf.lateral_sigma_lines
    lateral = np.where(np.abs(dl) <= psf.truncate * s_l, np.exp(-0.5 * (dl / s_l) ** 2), 0.0)
    return axial * lateral


def render_rf(scatterers: ScattererField, psf: PsfParams, grid: ImagingGrid,
              frame_id=None, chunk: int = 4096) -> RfFrame:
    """Sum of amplitude-weighted PSFs on the imaging grid."""
    if psf.center_freq_hz >= grid.sampling_freq_hz / 2:
        raise ValueError("PSF center frequency violates Nyquist for the grid sampling")
    half_a = psf.truncate * psf.sigma_t * grid.sampling_freq_hz
    half_l = psf.truncate * psf.lateral_sigma_lines
    if 2 * half_a > grid.axial_samples or 2 * half_l > grid.lateral_lines:
        raise ValueError(
            f"PSF support ({2 * half_a:.1f} x {2 * half_l:.1f} px) wider than the grid {grid.shape}"
        )
    n_a, n_l = grid.shape
    ka = int(math.ceil(half_a)) + 1
    kl = int(math.ceil(half_l)) + 1
    off_a = np.arange(-ka, ka + 1)
    off_l = np.arange(-kl, kl + 1)
    image = np.zeros(n_a * n_l)
    px = grid.to_pixels(scatterers.positions)
    amps = np.asarray(scatterers.amplitudes, dtype=np.float64)
    for start in range(0, len(amps), chunk):
        pa = px[start:start + chunk, 0]
        pl = px[start:start + chunk, 1]
        amp = amps[start:start + chunk]
        ia = np.floor(pa).astype(np.int64)[:, None] + off_a  # (m, Ka)
        il = np.floor(pl).astype(np.int64)[:, None] + off_l  # (m, Kl)
        wa = psf_value(ia - pa[:, None], np.zeros(1), psf, grid) * amp[:, None]
        wl = psf_value(np.zeros(1), il - pl[:, None], psf, grid)
        wa = np.where((ia >= 0) & (ia < n_a), wa, 0.0)
        wl = np.where((il >= 0) & (il < n_l), wl, 0.0)
        flat = np.clip(ia, 0, n_a - 1)[:, :, None] * n_l + np.clip(il, 0, n_l - 1)[:, None, :]
        weights = wa[:, :, None] * wl[:, None, :]
        image += np.bincount(flat.ravel(), weights=weights.ravel(), minlength=n_a * n_l)
    return RfFrame(image.reshape(n_a, n_l), grid.sampling_freq_hz, psf.center_freq_hz, frame_id)


def deform_and_render(scatterers: ScattererField, deformation: GroundTruthDeformation,
                      psf: PsfParams, grid: ImagingGrid,
                      frame_id=None) -> tuple[RfFrame, DisplacementField]:
    """Move scatterers by the deformation and render the second frame.

    Returns the frame and the dense ground-truth forward displacement on the
    pixel grid, mapping frame-1 pixel coordinates to frame-2 coordinates.
    """
    offsets = deformation.displacement_mm(scatterers.positions, grid)
    moved = scatterers.moved(offsets)
    frame = render_rf(moved, psf, grid, frame_id=frame_id)
    truth = deformation.pixel_field(grid)
    jump = max(
        float(np.abs(np.diff(c, axis=ax)).max(initial=0.0))
        for c in (truth.axial, truth.lateral) for ax in (0, 1)
    )
    if jump >= 1.0:
        raise ValueError(f"deformation is not continuous on the grid (max jump {jump:.3f} px)")
    return frame, truth


def simulate_pair(deformation: GroundTruthDeformation, seed: int,
                  grid: ImagingGrid | None = None, psf: PsfParams | None = None,
                  density: float = 150.0, pair_id: str = "pair"):
    """Render ``(frame1, frame2, truth)`` for one seeded phantom."""
    grid = grid or ImagingGrid()
    psf = psf or PsfParams()
    field_ = generate_scatterers(grid.phantom_extent(psf), density, seed,
                                 grid.resolution_cell_mm2(psf))
    f1 = render_rf(field_, psf, grid, frame_id=f"{pair_id}_a")
    f2, truth = deform_and_render(field_, deformation, psf, grid, frame_id=f"{pair_id}_b")
    return f1, f2, truth


def speckle_contrast(envelope_region: np.ndarray) -> float:
    """Ratio of envelope std to mean; about 0.5227 for fully developed speckle."""
    e = np.asarray(envelope_region, dtype=np.float64)
    return float(e.std() / e.mean())
