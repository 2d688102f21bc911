"""Grid, aperture, phase, and complex-modulation value types.

Conventions used throughout the package:

* arrays are indexed ``[row=y, col=x]``, so a grid with ``n_x`` by ``n_y``
  samples stores values with shape ``(n_y, n_x)``;
* the optical axis sits at sample ``(n_y // 2, n_x // 2)``, matching the FFT
  center convention (exact symmetry for odd sample counts);
* all quantities are SI (meters, radians);
* every type is an immutable value after construction -- arrays are copied in
  and marked read-only, so instances are safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

__all__ = [
    "GridSpec",
    "PhaseProfile",
    "ApertureMask",
    "ModulationProfile",
    "OpticalConfig",
    "make_circular_aperture",
    "make_modulation",
    "make_lens_phase",
]


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, order="C", copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Sampling of a metasurface plane: counts and pitch in meters."""

    n_x: int
    n_y: int
    pitch_m: float

    def __post_init__(self):
        if self.n_x < 2 or self.n_y < 2:
            raise ValidationError(f"grid needs >= 2 samples per axis, got {self.n_x}x{self.n_y}")
        if not (self.pitch_m > 0):
            raise ValidationError(f"pitch_m must be > 0, got {self.pitch_m}")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_y, self.n_x)

    @property
    def extent_x_m(self) -> float:
        return self.n_x * self.pitch_m

    @property
    def extent_y_m(self) -> float:
        return self.n_y * self.pitch_m

    def coords(self) -> tuple[np.ndarray, np.ndarray]:
        """Centered physical coordinates (x, y), broadcastable to ``shape``."""
        x = (np.arange(self.n_x) - self.n_x // 2) * self.pitch_m
        y = (np.arange(self.n_y) - self.n_y // 2) * self.pitch_m
        return x[np.newaxis, :], y[:, np.newaxis]

    def radius_sq(self) -> np.ndarray:
        x, y = self.coords()
        return x * x + y * y


def _check_grid_shape(grid: GridSpec, values: np.ndarray, what: str) -> None:
    if values.shape != grid.shape:
        raise ValidationError(
            f"{what} shape {values.shape} does not match grid shape {grid.shape}"
        )


@dataclass(frozen=True)
class PhaseProfile:
    """Phase modulation in radians. Values are stored unwrapped; only
    ``exp(j*phi)`` is consumed downstream, so ``phi`` and ``phi + 2*pi`` are
    physically identical."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen_array(self.values, np.float64)
        _check_grid_shape(self.grid, arr, "phase")
        if not np.isfinite(arr).all():
            raise ValidationError("phase values must be finite")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class ApertureMask:
    """Transmittance in [0, 1] per sample."""

    grid: GridSpec
    transmittance: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen_array(self.transmittance, np.float64)
        _check_grid_shape(self.grid, arr, "transmittance")
        if not np.isfinite(arr).all():
            raise ValidationError("transmittance must be finite")
        if arr.min(initial=0.0) < 0.0 or arr.max(initial=0.0) > 1.0:
            raise ValidationError("transmittance must lie in [0, 1]")
        object.__setattr__(self, "transmittance", arr)

    @property
    def open_fraction(self) -> float:
        return float(self.transmittance.mean())


@dataclass(frozen=True)
class ModulationProfile:
    """Complex modulation C = T * exp(j*phi)."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = _frozen_array(self.values, np.complex128)
        _check_grid_shape(self.grid, arr, "modulation")
        if not np.isfinite(arr).all():
            raise ValidationError("modulation values must be finite")
        # |T * e^{j phi}| can exceed T by a rounding ulp; allow that much.
        if np.abs(arr).max(initial=0.0) > 1.0 + 1e-12:
            raise ValidationError("modulation magnitude must not exceed 1")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class OpticalConfig:
    """Single-wavelength free-space geometry: wavelength and sensor distance.

    Paraxial validity (array extent much smaller than the sensor distance) is
    checked where a grid meets this config -- see ``propagate.fresnel_psf`` --
    and warned about rather than enforced.
    """

    wavelength_m: float
    sensor_distance_m: float

    def __post_init__(self):
        if not (self.wavelength_m > 0):
            raise ValidationError(f"wavelength_m must be > 0, got {self.wavelength_m}")
        if not (self.sensor_distance_m > 0):
            raise ValidationError(
                f"sensor_distance_m must be > 0, got {self.sensor_distance_m}"
            )


def make_circular_aperture(grid: GridSpec, diameter_m: float) -> ApertureMask:
    """Binary circular aperture centered on the optical axis.

    Samples strictly inside ``diameter_m / 2`` transmit; everything else is
    opaque. ``diameter_m`` may not exceed the smaller grid extent.
    """
    if diameter_m < 0:
        raise ValidationError(f"diameter_m must be >= 0, got {diameter_m}")
    max_d = min(grid.extent_x_m, grid.extent_y_m)
    if diameter_m > max_d * (1 + 1e-12):
        raise ValidationError(
            f"aperture diameter {diameter_m} exceeds grid extent {max_d}"
        )
    r_sq = grid.radius_sq()
    t = (r_sq < (diameter_m / 2.0) ** 2).astype(np.float64)
    return ApertureMask(grid, t)


def make_modulation(phase: PhaseProfile, aperture: ApertureMask) -> ModulationProfile:
    """C = T * exp(j*phi), elementwise."""
    if phase.grid != aperture.grid:
        raise ValidationError(
            f"phase grid {phase.grid} does not match aperture grid {aperture.grid}"
        )
    values = aperture.transmittance * np.exp(1j * phase.values)
    return ModulationProfile(phase.grid, values)


def make_lens_phase(grid: GridSpec, config: OpticalConfig, focal_m: float) -> PhaseProfile:
    """Ideal thin-lens phase, phi = -pi*(x^2 + y^2) / (lambda * f).

    Zero on the optical axis. With ``focal_m`` equal to the sensor distance
    this cancels the propagation chirp exactly, concentrating the PSF at the
    sensor center; used as the default optimization start.
    """
    if not (focal_m > 0):
        raise ValidationError(f"focal_m must be > 0, got {focal_m}")
    phi = -np.pi * grid.radius_sq() / (config.wavelength_m * focal_m)
    return PhaseProfile(grid, phi)
