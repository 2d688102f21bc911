"""Simulated opto-electronic measurement: pinhole image convolved with each
realized PSF, +/- pairs subtracted, binned and strided into feature maps.

Convention note: everything here is true convolution (kernels flipped),
matching the physics of incoherent image formation. CNN weights were
already flipped once at import, so feature maps line up with what the
electronic first layer computes. Comparisons use "valid" interior semantics;
optical and electronic boundary behavior differ and the interior isolates
kernel fidelity.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import fftconvolve

from .errors import ValidationError
from .kernels import ArrayPlan, SignedKernel
from .propagate import Psf

__all__ = [
    "SceneImage",
    "FeatureMap",
    "CaptureConfig",
    "render_measurement",
    "compose_feature",
    "electronic_conv",
    "bin_and_stride",
    "simulate_capture",
]


@dataclass(frozen=True)
class SceneImage:
    """Linear-intensity scene, stored as (C, H, W) with C in {1, 3}."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        if arr.ndim != 3 or arr.shape[0] not in (1, 3):
            raise ValidationError(f"scene must be (C, H, W) with C in {{1, 3}}, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("scene must be finite")
        if arr.min() < 0:
            raise ValidationError("scene intensities must be nonnegative")
        object.__setattr__(self, "values", arr)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "SceneImage":
        """Accepts (H, W) mono or (H, W, 3) RGB image layouts."""
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 2:
            return cls(arr[np.newaxis])
        if arr.ndim == 3 and arr.shape[2] == 3:
            return cls(np.moveaxis(arr, 2, 0))
        raise ValidationError(f"expected (H, W) or (H, W, 3), got shape {arr.shape}")

    @property
    def n_channels(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FeatureMap:
    """L signed channels after pair subtraction and binning."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        if arr.ndim != 3:
            raise ValidationError(f"feature map must be (L, H, W), got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValidationError("feature map must be finite")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class CaptureConfig:
    """Sensor-realism knobs. ``gains`` holds the per-pair compose divisors
    derived from the DKO results (see ``simulate_capture``)."""

    samples_per_tap: int = 1
    stride: int = 1
    noise: str = "none"  # "gaussian" | "poisson"
    noise_sigma: float = 0.0
    poisson_scale: float = 1.0
    quantization_bits: int | None = None
    seed: int = 0
    gains: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.samples_per_tap < 1:
            raise ValidationError("samples_per_tap must be >= 1")
        if self.stride < 1:
            raise ValidationError("stride must be >= 1")
        if self.noise not in ("none", "gaussian", "poisson"):
            raise ValidationError(f"unknown noise model {self.noise!r}")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")
        if not (self.poisson_scale > 0):
            raise ValidationError("poisson_scale must be > 0")
        if self.quantization_bits is not None and self.quantization_bits < 1:
            raise ValidationError("quantization_bits must be >= 1")


def render_measurement(scene_channel: np.ndarray, psf: Psf | np.ndarray) -> np.ndarray:
    """Linear convolution of one scene channel with a footprint-cropped PSF,
    "valid" region. Output is clamped at zero (FFT roundoff only)."""
    scene_channel = np.asarray(scene_channel, dtype=np.float64)
    taps = psf.values if isinstance(psf, Psf) else np.asarray(psf, dtype=np.float64)
    if scene_channel.ndim != 2 or taps.ndim != 2:
        raise ValidationError("scene channel and PSF must be 2-D")
    if taps.shape[0] > scene_channel.shape[0] or taps.shape[1] > scene_channel.shape[1]:
        raise ValidationError(
            f"PSF footprint {taps.shape} exceeds scene {scene_channel.shape}"
        )
    if taps.min(initial=0.0) < 0:
        raise ValidationError("PSF taps must be nonnegative")
    out = fftconvolve(scene_channel, taps, mode="valid")
    return np.maximum(out, 0.0)


def compose_feature(meas_plus: np.ndarray, meas_minus: np.ndarray, gain: float,
                    cfg: CaptureConfig | None = None) -> np.ndarray:
    """(meas_plus - meas_minus) / gain, then optional noise and quantization.

    Poisson noise (photon-like) applies to the two nonnegative measurements
    before subtraction; Gaussian read noise applies to the composed signed
    feature. With no noise configured the output is deterministic.
    """
    meas_plus = np.asarray(meas_plus, dtype=np.float64)
    meas_minus = np.asarray(meas_minus, dtype=np.float64)
    if meas_plus.shape != meas_minus.shape:
        raise ValidationError(
            f"measurement shapes differ: {meas_plus.shape} vs {meas_minus.shape}"
        )
    if gain == 0:
        raise ValidationError("gain must be nonzero")

    rng = None
    if cfg is not None and (cfg.noise != "none" or cfg.quantization_bits is not None):
        rng = np.random.default_rng(cfg.seed)
    if cfg is not None and cfg.noise == "poisson":
        scale = cfg.poisson_scale
        meas_plus = rng.poisson(np.maximum(meas_plus, 0.0) * scale) / scale
        meas_minus = rng.poisson(np.maximum(meas_minus, 0.0) * scale) / scale

    out = (meas_plus - meas_minus) / gain

    if cfg is not None and cfg.noise == "gaussian" and cfg.noise_sigma > 0:
        out = out + rng.normal(0.0, cfg.noise_sigma, out.shape)
    if cfg is not None and cfg.quantization_bits is not None:
        out = _quantize_uniform(out, cfg.quantization_bits)
    return out


def _quantize_uniform(x: np.ndarray, bits: int) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi == lo:
        return x
    step = (hi - lo) / (2 ** bits - 1)
    return lo + np.round((x - lo) / step) * step


def _group_kernels(kernels: list[SignedKernel], n_scene_channels: int
                   ) -> tuple[int, int, list[list[SignedKernel]]]:
    if not kernels:
        raise ValidationError("no kernels given")
    C = 1 if kernels[0].channel == "mono" else 3
    if len(kernels) % C != 0:
        raise ValidationError(f"kernel count {len(kernels)} is not a multiple of C={C}")
    if C != n_scene_channels:
        raise ValidationError(
            f"scene has {n_scene_channels} channels but kernels expect {C}"
        )
    L = len(kernels) // C
    expected = ("mono",) if C == 1 else ("R", "G", "B")
    grouped = []
    for l in range(L):
        row = kernels[l * C:(l + 1) * C]
        if tuple(k.channel for k in row) != expected:
            raise ValidationError("kernel ordering must be output-channel major, colors R,G,B")
        grouped.append(row)
    return L, C, grouped


def electronic_conv(scene: SceneImage, kernels: list[SignedKernel], stride: int = 1,
                    padding: str = "valid") -> FeatureMap:
    """Reference electronic first layer: true convolution, color channels
    summed per output channel. This is the target computation the optical
    path approximates."""
    if stride < 1:
        raise ValidationError("stride must be >= 1")
    if padding not in ("valid", "zero"):
        raise ValidationError(f"padding must be 'valid' or 'zero', got {padding!r}")
    L, C, grouped = _group_kernels(kernels, scene.n_channels)
    k = grouped[0][0].size
    planes = scene.values
    if padding == "zero":
        half = k // 2
        planes = np.pad(planes, ((0, 0), (half, half), (half, half)))
    if k > planes.shape[1] or k > planes.shape[2]:
        raise ValidationError(f"kernel size {k} exceeds scene extent {planes.shape[1:]}")
    out = []
    for row in grouped:
        acc = None
        for c in range(C):
            conv = fftconvolve(planes[c], row[c].taps, mode="valid")
            acc = conv if acc is None else acc + conv
        out.append(acc[::stride, ::stride])
    return FeatureMap(np.stack(out))


def bin_and_stride(measurement: np.ndarray, samples_per_tap: int, stride: int = 1
                   ) -> np.ndarray:
    """Mean over samples_per_tap^2 blocks, then subsample by stride.
    Trailing samples that do not fill a block are truncated with a warning."""
    measurement = np.asarray(measurement, dtype=np.float64)
    if samples_per_tap < 1 or stride < 1:
        raise ValidationError("samples_per_tap and stride must be >= 1")
    spt = samples_per_tap
    if spt > 1:
        ny, nx = measurement.shape
        ty, tx = (ny // spt) * spt, (nx // spt) * spt
        if (ty, tx) != (ny, nx):
            warnings.warn(
                f"truncating measurement {measurement.shape} to {(ty, tx)} "
                f"for {spt}x{spt} binning", stacklevel=2,
            )
        measurement = measurement[:ty, :tx]
        measurement = measurement.reshape(ty // spt, spt, tx // spt, spt).mean(axis=(1, 3))
    return measurement[::stride, ::stride]


def simulate_capture(scene: SceneImage, psf_pairs: list[tuple[np.ndarray, np.ndarray]],
                     plan: ArrayPlan, cfg: CaptureConfig) -> FeatureMap:
    """Full capture pipeline for a planned layer.

    ``psf_pairs`` holds footprint-cropped (plus, minus) PSFs in plan pair
    order. Each pair's measurements are composed with its divisor from
    ``cfg.gains`` (DKO fits ``alpha * psf ~= target``, so the divisor that
    lands features in electronic-kernel units is ``1 / alpha``); color bands
    are summed digitally per output channel, then binned/strided.
    """
    n_pairs = len(plan) // 2
    if len(psf_pairs) != n_pairs:
        raise ValidationError(f"expected {n_pairs} PSF pairs, got {len(psf_pairs)}")
    gains = cfg.gains if cfg.gains is not None else (1.0,) * n_pairs
    if len(gains) != n_pairs:
        raise ValidationError(f"expected {n_pairs} gains, got {len(gains)}")
    colors = plan.colors
    if scene.n_channels != len(colors):
        raise ValidationError(
            f"scene has {scene.n_channels} channels but plan color mode is {plan.color_mode}"
        )

    acc: dict[int, np.ndarray] = {}
    for p in range(n_pairs):
        element = plan.elements[2 * p]
        channel = colors.index(element.color) if len(colors) > 1 else 0
        meas_plus = render_measurement(scene.values[channel], psf_pairs[p][0])
        meas_minus = render_measurement(scene.values[channel], psf_pairs[p][1])
        pair_cfg = replace(cfg, seed=int(np.uint64(cfg.seed) ^ np.uint64(2 * p)))
        feat = compose_feature(meas_plus, meas_minus, gains[p], pair_cfg)
        l = element.out_channel
        acc[l] = feat if l not in acc else acc[l] + feat

    channels = [bin_and_stride(acc[l], cfg.samples_per_tap, cfg.stride)
                for l in range(plan.output_channels)]
    return FeatureMap(np.stack(channels))
