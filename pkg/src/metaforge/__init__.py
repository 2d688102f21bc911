"""Metasurface phase-profile design by direct kernel optimization, plus
capture simulation, evaluation metrics, and cost benchmarks."""

from . import _kernels
from .fieldcore import (
    ApertureMask,
    GridSpec,
    ModulationProfile,
    OpticalConfig,
    PhaseProfile,
    make_circular_aperture,
    make_lens_phase,
    make_modulation,
)
from .propagate import Psf, SensorGrid, crop_psf, fresnel_psf, sensor_pitch

__version__ = "0.1.0"

KERNEL_BACKEND = _kernels.BACKEND

__all__ = [
    "GridSpec",
    "PhaseProfile",
    "ApertureMask",
    "ModulationProfile",
    "OpticalConfig",
    "make_circular_aperture",
    "make_modulation",
    "make_lens_phase",
    "SensorGrid",
    "Psf",
    "fresnel_psf",
    "sensor_pitch",
    "crop_psf",
    "KERNEL_BACKEND",
    "__version__",
]
