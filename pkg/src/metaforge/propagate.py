"""Fresnel propagation of a modulated wavefront to the sensor plane.

Single-FFT Fresnel form: the sensor-plane field is the centered unitary DFT
of the modulated field times the quadratic chirp ``exp(j*pi*(x^2+y^2)/(lambda*s))``,
and the PSF is its squared magnitude. The constant phase prefactor outside
the transform is dropped (only intensity is observed). The unitary
normalization makes Parseval exact: ``sum(PSF) == sum(|C|^2)`` up to roundoff.

Sensor sampling is fixed by the transform: ``pitch = lambda*s / (N*dx)``.
Zero-padding the field by an integer factor refines the sensor sampling at
proportional cost; the default is no padding.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.fft as spfft

from . import _kernels
from .errors import ValidationError
from .fieldcore import GridSpec, ModulationProfile, OpticalConfig

__all__ = [
    "SensorGrid",
    "Psf",
    "CropResult",
    "sensor_pitch",
    "fresnel_psf",
    "crop_psf",
    "cfft2",
    "icfft2",
]


@dataclass(frozen=True)
class SensorGrid:
    """Sensor-plane sampling implied by the source grid and optics."""

    n_u: int
    n_v: int
    pitch_m: float

    def __post_init__(self):
        if self.n_u < 1 or self.n_v < 1:
            raise ValidationError("sensor grid needs >= 1 sample per axis")
        if not (self.pitch_m > 0):
            raise ValidationError("sensor pitch must be > 0")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_v, self.n_u)


@dataclass(frozen=True)
class Psf:
    """Nonnegative sensor-plane power pattern, in physical (unnormalized) units."""

    sensor: SensorGrid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        if arr.shape != self.sensor.shape:
            raise ValidationError(
                f"PSF shape {arr.shape} does not match sensor shape {self.sensor.shape}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError("PSF values must be finite")
        if arr.size and arr.min() < 0:
            raise ValidationError("PSF values must be nonnegative")
        object.__setattr__(self, "values", arr)

    @property
    def total_power(self) -> float:
        return float(self.values.sum())


def cfft2(a: np.ndarray) -> np.ndarray:
    """Centered unitary 2-D DFT: grid center maps to the zero frequency."""
    return spfft.fftshift(spfft.fft2(spfft.ifftshift(a), norm="ortho"))


def icfft2(a: np.ndarray) -> np.ndarray:
    """Inverse (= adjoint) of ``cfft2``."""
    return spfft.fftshift(spfft.ifft2(spfft.ifftshift(a), norm="ortho"))


def sensor_pitch(config: OpticalConfig, grid: GridSpec) -> float:
    """Sensor-plane sample pitch, lambda*s / (N*dx), N = max sample count."""
    n = max(grid.n_x, grid.n_y)
    return config.wavelength_m * config.sensor_distance_m / (n * grid.pitch_m)


def propagation_chirp(grid: GridSpec, config: OpticalConfig) -> np.ndarray:
    """Quadratic phase pi*(x^2+y^2)/(lambda*s) in radians, shape ``grid.shape``."""
    lam_s = config.wavelength_m * config.sensor_distance_m
    return np.broadcast_to(np.pi * grid.radius_sq() / lam_s, grid.shape).copy()


def _warn_if_nonparaxial(grid: GridSpec, config: OpticalConfig) -> None:
    extent = max(grid.extent_x_m, grid.extent_y_m)
    if extent > 0.5 * config.sensor_distance_m:
        warnings.warn(
            f"grid extent {extent:.3g} m is not small against sensor distance "
            f"{config.sensor_distance_m:.3g} m; paraxial Fresnel model is questionable",
            stacklevel=3,
        )


def _pad_field(field_arr: np.ndarray, pad_factor: int) -> np.ndarray:
    if pad_factor == 1:
        return field_arr
    ny, nx = field_arr.shape
    py, px = ny * pad_factor, nx * pad_factor
    out = np.zeros((py, px), dtype=field_arr.dtype)
    oy, ox = py // 2 - ny // 2, px // 2 - nx // 2
    out[oy:oy + ny, ox:ox + nx] = field_arr
    return out


def psf_from_field(field_arr: np.ndarray, grid: GridSpec, config: OpticalConfig,
                   pad_factor: int = 1) -> Psf:
    """PSF of an already-chirped complex field: |centered unitary DFT|^2.

    Shared by the generic propagation entry point and the optimizer's fused
    forward path, so both produce bit-identical transforms for equal fields.
    """
    if pad_factor < 1:
        raise ValidationError(f"pad_factor must be >= 1, got {pad_factor}")
    padded = _pad_field(field_arr, pad_factor)
    spectrum = cfft2(padded)
    values = _kernels.field_intensity(spectrum)
    pitch = sensor_pitch(config, grid) / pad_factor
    sensor = SensorGrid(n_u=padded.shape[1], n_v=padded.shape[0], pitch_m=pitch)
    return Psf(sensor, values)


def fresnel_psf(modulation: ModulationProfile, config: OpticalConfig,
                pad_factor: int = 1) -> Psf:
    """Sensor-plane PSF of a modulated wavefront (single-FFT Fresnel)."""
    _warn_if_nonparaxial(modulation.grid, config)
    chirp = propagation_chirp(modulation.grid, config)
    field_arr = modulation.values * np.exp(1j * chirp)
    return psf_from_field(field_arr, modulation.grid, config, pad_factor)


class CropResult(NamedTuple):
    psf: Psf
    discarded_fraction: float


def _central_window(shape: tuple[int, int], window: tuple[int, int]) -> tuple[slice, slice]:
    (ny, nx), (wy, wx) = shape, window
    if wy < 1 or wx < 1:
        raise ValidationError(f"crop window must be >= 1, got {window}")
    if wy > ny or wx > nx:
        raise ValidationError(f"crop window {window} exceeds extent {shape}")
    oy, ox = ny // 2 - wy // 2, nx // 2 - wx // 2
    return slice(oy, oy + wy), slice(ox, ox + wx)


def crop_psf(psf: Psf, window: int | tuple[int, int]) -> CropResult:
    """Central window of a PSF plus the fraction of power discarded."""
    wy, wx = (window, window) if isinstance(window, int) else window
    sy, sx = _central_window(psf.values.shape, (wy, wx))
    cropped = psf.values[sy, sx]
    total = psf.values.sum()
    discarded = 0.0 if total == 0 else float(1.0 - cropped.sum() / total)
    sensor = SensorGrid(n_u=wx, n_v=wy, pitch_m=psf.sensor.pitch_m)
    return CropResult(Psf(sensor, cropped), max(discarded, 0.0))
