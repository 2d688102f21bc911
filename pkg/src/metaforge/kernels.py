"""Target convolution kernels: ingestion, signed decomposition, planning,
and embedding onto the sensor grid.

A signed k x k kernel is realized optically as two nonnegative halves
(``plus - minus`` reconstructs it exactly), each assigned to its own
metasurface. An RGB first layer with L output channels therefore needs
``6 L`` elements (3 color bands x 2 signs); a mono layer needs ``2 L``.

CNN weights use cross-correlation convention while the optics convolve, so
the importer flips each tap matrix once at ingestion (and the exporter flips
back). Everything downstream is plain convolution.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .propagate import SensorGrid

__all__ = [
    "SignedKernel",
    "KernelHalfPair",
    "PlanElement",
    "ArrayPlan",
    "EmbeddedTarget",
    "split_signed",
    "plan_array",
    "embed_target",
    "import_first_layer",
    "export_first_layer",
    "save_plan",
    "load_plan",
    "gaussian_kernel",
    "dog_kernel",
    "delta_kernel",
    "smooth_random_kernel",
]

CHANNELS = ("mono", "R", "G", "B")
COLOR_MODES = ("mono-signed", "rgb-signed")


@dataclass(frozen=True)
class SignedKernel:
    """A single-channel target kernel with a physical tap footprint."""

    taps: np.ndarray = field(repr=False)
    channel: str = "mono"
    tap_pitch_m: float = 1.0

    def __post_init__(self):
        arr = np.array(self.taps, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ValidationError(f"kernel taps must be square, got shape {arr.shape}")
        if arr.shape[0] % 2 == 0:
            raise ValidationError(
                f"kernel size must be odd for unambiguous centering, got {arr.shape[0]}"
            )
        if not np.isfinite(arr).all():
            raise ValidationError("kernel taps must be finite")
        if self.channel not in CHANNELS:
            raise ValidationError(f"channel must be one of {CHANNELS}, got {self.channel!r}")
        if not (self.tap_pitch_m > 0):
            raise ValidationError("tap_pitch_m must be > 0")
        object.__setattr__(self, "taps", arr)

    @property
    def size(self) -> int:
        return self.taps.shape[0]


@dataclass(frozen=True)
class KernelHalfPair:
    """Nonnegative halves with disjoint support; ``plus - minus`` is the kernel."""

    plus: np.ndarray = field(repr=False)
    minus: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.array(self.plus, dtype=np.float64, copy=True)
        m = np.array(self.minus, dtype=np.float64, copy=True)
        p.setflags(write=False)
        m.setflags(write=False)
        if p.shape != m.shape:
            raise ValidationError("half shapes must match")
        if p.min(initial=0.0) < 0 or m.min(initial=0.0) < 0:
            raise ValidationError("halves must be nonnegative")
        object.__setattr__(self, "plus", p)
        object.__setattr__(self, "minus", m)

    def reconstruct(self) -> np.ndarray:
        return self.plus - self.minus


def split_signed(kernel: SignedKernel) -> KernelHalfPair:
    """plus = max(h, 0), minus = max(-h, 0); exact reconstruction."""
    h = kernel.taps
    return KernelHalfPair(np.maximum(h, 0.0), np.maximum(-h, 0.0))


@dataclass(frozen=True)
class PlanElement:
    """One physical metasurface slot in the array."""

    index: int
    out_channel: int
    color: str
    sign: int  # +1 or -1
    m: int
    n: int

    def as_dict(self) -> dict:
        return {
            "index": self.index,
            "out_channel": self.out_channel,
            "color": self.color,
            "sign": "+" if self.sign > 0 else "-",
            "m": self.m,
            "n": self.n,
        }


@dataclass(frozen=True)
class ArrayPlan:
    """Deterministic layout of the metasurface array for an L-channel layer.

    Ordering is total and stable: output channel major, then color (R, G, B),
    then sign (+, -). Element count is 2L for mono-signed, 6L for rgb-signed.
    """

    output_channels: int
    color_mode: str
    elements: tuple[PlanElement, ...]

    @property
    def colors(self) -> tuple[str, ...]:
        return ("mono",) if self.color_mode == "mono-signed" else ("R", "G", "B")

    def __len__(self) -> int:
        return len(self.elements)

    def as_dict(self) -> dict:
        return {
            "output_channels": self.output_channels,
            "color_mode": self.color_mode,
            "elements": [e.as_dict() for e in self.elements],
        }

    @staticmethod
    def from_dict(d: dict) -> "ArrayPlan":
        elements = tuple(
            PlanElement(
                index=e["index"],
                out_channel=e["out_channel"],
                color=e["color"],
                sign=1 if e["sign"] == "+" else -1,
                m=e["m"],
                n=e["n"],
            )
            for e in d["elements"]
        )
        return ArrayPlan(d["output_channels"], d["color_mode"], elements)


def plan_array(L: int, color_mode: str) -> ArrayPlan:
    """Plan the 2L (mono) or 6L (rgb) element layout for L output channels."""
    if L < 1:
        raise ValidationError(f"L must be >= 1, got {L}")
    if color_mode not in COLOR_MODES:
        raise ValidationError(f"color_mode must be one of {COLOR_MODES}, got {color_mode!r}")
    colors = ("mono",) if color_mode == "mono-signed" else ("R", "G", "B")
    count = 2 * L * len(colors)
    n_cols = math.ceil(math.sqrt(count))
    elements = []
    idx = 0
    for out_channel in range(L):
        for color in colors:
            for sign in (1, -1):
                elements.append(
                    PlanElement(
                        index=idx,
                        out_channel=out_channel,
                        color=color,
                        sign=sign,
                        m=idx // n_cols,
                        n=idx % n_cols,
                    )
                )
                idx += 1
    return ArrayPlan(L, color_mode, tuple(elements))


def save_plan(plan: ArrayPlan, path) -> None:
    with open(path, "w") as f:
        json.dump(plan.as_dict(), f, indent=2)


def load_plan(path) -> ArrayPlan:
    with open(path) as f:
        return ArrayPlan.from_dict(json.load(f))


@dataclass(frozen=True)
class EmbeddedTarget:
    """A nonnegative half-kernel placed on the full sensor grid.

    Zeros everywhere outside the central footprint, so an L2 fit against it
    also penalizes stray PSF power outside the kernel support.
    """

    sensor: SensorGrid
    values: np.ndarray = field(repr=False)
    footprint_window: int = 0
    samples_per_tap: int = 1

    def __post_init__(self):
        arr = np.array(self.values, dtype=np.float64, order="C", copy=True)
        arr.setflags(write=False)
        if arr.shape != self.sensor.shape:
            raise ValidationError(
                f"target shape {arr.shape} does not match sensor {self.sensor.shape}"
            )
        if arr.min(initial=0.0) < 0:
            raise ValidationError("embedded target must be nonnegative")
        object.__setattr__(self, "values", arr)


def embed_target(half: np.ndarray, sensor: SensorGrid, samples_per_tap: int = 1) -> EmbeddedTarget:
    """Expand a nonnegative k x k half onto the sensor grid, mass-preserving.

    Each tap becomes a ``samples_per_tap`` square block scaled by
    ``1 / samples_per_tap**2``, centered on the grid.
    """
    half = np.asarray(half, dtype=np.float64)
    if half.ndim != 2:
        raise ValidationError("half-kernel must be 2-D")
    if half.min(initial=0.0) < 0:
        raise ValidationError("half-kernel must be nonnegative")
    if samples_per_tap < 1:
        raise ValidationError(f"samples_per_tap must be >= 1, got {samples_per_tap}")
    ky, kx = half.shape
    spt = samples_per_tap
    fy, fx = ky * spt, kx * spt
    nv, nu = sensor.shape
    if fy > nv or fx > nu:
        raise ValidationError(
            f"kernel footprint {(fy, fx)} exceeds sensor grid {(nv, nu)}"
        )
    block = np.kron(half, np.full((spt, spt), 1.0 / (spt * spt)))
    values = np.zeros((nv, nu), dtype=np.float64)
    oy, ox = nv // 2 - fy // 2, nu // 2 - fx // 2
    values[oy:oy + fy, ox:ox + fx] = block
    return EmbeddedTarget(sensor, values, footprint_window=max(fy, fx), samples_per_tap=spt)


def import_first_layer(tensor: np.ndarray, tap_pitch_m: float) -> list[SignedKernel]:
    """Ingest an [L, C, k, k] first-layer weight tensor as SignedKernels.

    Tap matrices are flipped here (cross-correlation weights to convolution
    kernels); ordering matches ``plan_array``: output channel major, then
    color. C must be 1 (mono) or 3 (RGB); k must be odd -- pad even kernels
    externally before import.
    """
    tensor = np.asarray(tensor, dtype=np.float64)
    if tensor.ndim != 4:
        raise ValidationError(f"expected a 4-D [L, C, k, k] tensor, got shape {tensor.shape}")
    L, C, ky, kx = tensor.shape
    if C not in (1, 3):
        raise ValidationError(f"unsupported channel count C={C}; expected 1 or 3")
    if ky != kx:
        raise ValidationError(f"kernels must be square, got {ky}x{kx}")
    if ky % 2 == 0:
        raise ValidationError(
            f"even kernel size {ky} is unsupported (centering ambiguity); pad externally"
        )
    if not np.isfinite(tensor).all():
        raise ValidationError("kernel tensor must be finite")
    colors = ("mono",) if C == 1 else ("R", "G", "B")
    kernels = []
    for l in range(L):
        for c, color in enumerate(colors):
            kernels.append(
                SignedKernel(tensor[l, c, ::-1, ::-1], channel=color, tap_pitch_m=tap_pitch_m)
            )
    return kernels


def export_first_layer(kernels: list[SignedKernel]) -> np.ndarray:
    """Inverse of ``import_first_layer`` (round-trip identity)."""
    if not kernels:
        raise ValidationError("no kernels to export")
    C = 1 if kernels[0].channel == "mono" else 3
    if len(kernels) % C != 0:
        raise ValidationError(f"kernel count {len(kernels)} is not a multiple of C={C}")
    L = len(kernels) // C
    k = kernels[0].size
    tensor = np.empty((L, C, k, k), dtype=np.float64)
    for l in range(L):
        for c in range(C):
            tensor[l, c] = kernels[l * C + c].taps[::-1, ::-1]
    return tensor


def gaussian_kernel(k: int, sigma_taps: float, channel: str = "mono",
                    tap_pitch_m: float = 1.0) -> SignedKernel:
    """Isotropic Gaussian with peak 1 (all-positive target)."""
    r = np.arange(k) - k // 2
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma_taps ** 2))
    return SignedKernel(g, channel=channel, tap_pitch_m=tap_pitch_m)


def dog_kernel(k: int, sigma_inner: float, sigma_outer: float, channel: str = "mono",
               tap_pitch_m: float = 1.0) -> SignedKernel:
    """Difference of unit-mass Gaussians (signed, near-zero mean)."""
    def _unit_mass(sigma):
        r = np.arange(k) - k // 2
        g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2.0 * sigma ** 2))
        return g / g.sum()

    taps = _unit_mass(sigma_inner) - _unit_mass(sigma_outer)
    taps = taps / np.abs(taps).max()
    return SignedKernel(taps, channel=channel, tap_pitch_m=tap_pitch_m)


def delta_kernel(k: int, channel: str = "mono", tap_pitch_m: float = 1.0) -> SignedKernel:
    """Unit impulse at the center tap."""
    taps = np.zeros((k, k))
    taps[k // 2, k // 2] = 1.0
    return SignedKernel(taps, channel=channel, tap_pitch_m=tap_pitch_m)


def smooth_random_kernel(k: int, rng: np.random.Generator, smooth_sigma: float = 1.0,
                         channel: str = "mono", tap_pitch_m: float = 1.0) -> SignedKernel:
    """Low-pass filtered white noise, normalized to unit peak magnitude."""
    taps = ndimage.gaussian_filter(rng.standard_normal((k, k)), smooth_sigma)
    taps = taps / np.abs(taps).max()
    return SignedKernel(taps, channel=channel, tap_pitch_m=tap_pitch_m)
