"""DKO objective and its analytic gradient with respect to the phase.

The objective for one metasurface is

    L(phi) = || alpha * h(phi) - t ||^2,   h = |U(T e^{j phi} e^{j chirp})|^2,

where ``U`` is the centered unitary DFT, ``t`` the embedded target half, and
``alpha`` an optional radiometric gain fitted in closed form (least squares,
clamped at zero). The gain absorbs the arbitrary scale mismatch between a
physical PSF (bounded energy) and CNN-kernel units; it is recorded and later
compensated digitally at capture.

Gradient derivation (Wirtinger chain through the unitary transform): with
``g = dL/dh = 2 alpha (alpha h - t)`` held at the current fitted gain,

    dL/dphi = 2 Im( conj(f) . U^H( g . F ) ),    f = T e^{j(phi+chirp)},  F = U f.

The gain is treated as frozen per evaluation (alternating minimization).
Because the fitted gain is the interior least-squares optimum, the envelope
theorem makes this gradient agree with finite differences of the refitted
loss, which is what ``fd_check`` verifies.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ValidationError
from .fieldcore import ApertureMask, GridSpec, OpticalConfig, PhaseProfile
from .kernels import EmbeddedTarget
from .propagate import Psf, SensorGrid, cfft2, icfft2, propagation_chirp, sensor_pitch

__all__ = [
    "DkoLossReport",
    "PhaseGradient",
    "PairEvaluation",
    "dko_loss",
    "dko_grad",
    "dko_loss_and_grad",
    "pair_loss_and_grad",
    "fd_check",
    "forward_psf",
    "raw_forward",
    "raw_phase_grad",
    "fit_gain_joint",
]


@dataclass(frozen=True)
class DkoLossReport:
    """Loss value, fitted gain, and the full-grid residual alpha*h - t."""

    loss: float
    gain: float
    residual: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PhaseGradient:
    """dLoss/dphi per sample; identically zero outside the aperture support."""

    grid: GridSpec
    values: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class PairEvaluation:
    """Joint evaluation of a +/- pair sharing one radiometric gain."""

    gain: float
    losses: tuple[float, float]
    grads: tuple[np.ndarray, np.ndarray]
    psfs: tuple[np.ndarray, np.ndarray]

    @property
    def joint_loss(self) -> float:
        return self.losses[0] + self.losses[1]


def raw_forward(phase_values: np.ndarray, transmittance: np.ndarray,
                chirp: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(field, spectrum, psf) for raw arrays; the optimizer's inner loop."""
    f = _kernels.modulated_field(phase_values, transmittance, chirp)
    F = cfft2(f)
    h = _kernels.field_intensity(F)
    return f, F, h


def raw_phase_grad(field: np.ndarray, spectrum: np.ndarray,
                   dloss_dpsf: np.ndarray) -> np.ndarray:
    """Pull a PSF-space gradient back to phase space (see module docstring).

    Shared by the DKO gradient and the end-to-end training path, so a single
    finite-difference validation covers both.
    """
    backprop = icfft2(dloss_dpsf * spectrum)
    return _kernels.phase_grad(field, backprop, 2.0)


def _fit_gain(num: float, den: float) -> float:
    if den <= 0.0:
        return 0.0
    return max(0.0, num / den)


def fit_gain_joint(psfs: list[np.ndarray], targets: list[np.ndarray]) -> float:
    """Least-squares gain shared across residuals, clamped at zero."""
    num = sum(float(np.vdot(h, t).real) for h, t in zip(psfs, targets))
    den = sum(float(np.vdot(h, h).real) for h in psfs)
    return _fit_gain(num, den)


def _check_problem(phase: PhaseProfile, aperture: ApertureMask,
                   target: EmbeddedTarget, config: OpticalConfig) -> None:
    if phase.grid != aperture.grid:
        raise ValidationError("phase and aperture grids differ")
    if target.sensor.shape != phase.grid.shape:
        raise ValidationError(
            f"target sensor shape {target.sensor.shape} does not match the "
            f"unpadded propagation grid {phase.grid.shape}"
        )
    expected = sensor_pitch(config, phase.grid)
    if not np.isclose(target.sensor.pitch_m, expected, rtol=1e-9, atol=0.0):
        raise ValidationError(
            f"target sensor pitch {target.sensor.pitch_m} is not the pitch "
            f"{expected} implied by the grid and optics"
        )


def dko_loss(phase: PhaseProfile, aperture: ApertureMask, target: EmbeddedTarget,
             config: OpticalConfig, fit_gain: bool = True) -> DkoLossReport:
    """Evaluate the DKO objective. A zero PSF with gain fitting is the
    documented degenerate case: gain 0, loss = ||target||^2."""
    _check_problem(phase, aperture, target, config)
    chirp = propagation_chirp(phase.grid, config)
    _, _, h = raw_forward(phase.values, aperture.transmittance, chirp)
    t = target.values
    alpha = fit_gain_joint([h], [t]) if fit_gain else 1.0
    residual = alpha * h - t
    return DkoLossReport(loss=float(np.vdot(residual, residual).real),
                         gain=alpha, residual=residual)


def dko_grad(phase: PhaseProfile, aperture: ApertureMask, target: EmbeddedTarget,
             config: OpticalConfig, fit_gain: bool = True) -> PhaseGradient:
    """Analytic gradient of ``dko_loss`` (gain frozen at its fitted value)."""
    _, grad = dko_loss_and_grad(phase, aperture, target, config, fit_gain)
    return grad


def dko_loss_and_grad(phase: PhaseProfile, aperture: ApertureMask,
                      target: EmbeddedTarget, config: OpticalConfig,
                      fit_gain: bool = True) -> tuple[DkoLossReport, PhaseGradient]:
    """One fused evaluation; cheaper than separate loss and grad calls."""
    _check_problem(phase, aperture, target, config)
    chirp = propagation_chirp(phase.grid, config)
    f, F, h = raw_forward(phase.values, aperture.transmittance, chirp)
    t = target.values
    alpha = fit_gain_joint([h], [t]) if fit_gain else 1.0
    residual = alpha * h - t
    loss = float(np.vdot(residual, residual).real)
    grad_values = raw_phase_grad(f, F, (2.0 * alpha) * residual)
    report = DkoLossReport(loss=loss, gain=alpha, residual=residual)
    return report, PhaseGradient(phase.grid, grad_values)


def pair_loss_and_grad(phases: tuple[np.ndarray, np.ndarray],
                       transmittance: np.ndarray,
                       targets: tuple[np.ndarray, np.ndarray],
                       chirp: np.ndarray,
                       fit_gain: bool = True) -> PairEvaluation:
    """Joint +/- evaluation on raw arrays with one shared gain.

    The shared gain is the joint least-squares optimum over both residuals;
    subtraction at capture requires a common radiometric scale. Gradients
    freeze the gain at that value.
    """
    f0, F0, h0 = raw_forward(phases[0], transmittance, chirp)
    f1, F1, h1 = raw_forward(phases[1], transmittance, chirp)
    if fit_gain:
        alpha = fit_gain_joint([h0, h1], [targets[0], targets[1]])
    else:
        alpha = 1.0
    r0 = alpha * h0 - targets[0]
    r1 = alpha * h1 - targets[1]
    g0 = raw_phase_grad(f0, F0, (2.0 * alpha) * r0)
    g1 = raw_phase_grad(f1, F1, (2.0 * alpha) * r1)
    return PairEvaluation(
        gain=alpha,
        losses=(float(np.vdot(r0, r0).real), float(np.vdot(r1, r1).real)),
        grads=(g0, g1),
        psfs=(h0, h1),
    )


def forward_psf(phase: PhaseProfile, aperture: ApertureMask,
                config: OpticalConfig) -> Psf:
    """PSF via the optimizer's fused forward path.

    Numerically interchangeable with ``propagate.fresnel_psf`` of the same
    modulation; bit-identical to what the DKO loop sees, which matters for
    exact fixed-point checks.
    """
    if phase.grid != aperture.grid:
        raise ValidationError("phase and aperture grids differ")
    chirp = propagation_chirp(phase.grid, config)
    _, _, h = raw_forward(phase.values, aperture.transmittance, chirp)
    pitch = sensor_pitch(config, phase.grid)
    sensor = SensorGrid(n_u=phase.grid.n_x, n_v=phase.grid.n_y, pitch_m=pitch)
    return Psf(sensor, h)


def fd_check(phase: PhaseProfile, aperture: ApertureMask, target: EmbeddedTarget,
             config: OpticalConfig, n_probes: int = 20, step: float = 1e-6,
             fit_gain: bool = True, seed: int = 0, loss_fn=None) -> float:
    """Worst relative error between analytic and central-difference derivatives.

    Probes ``n_probes`` positions inside the aperture support. ``loss_fn`` is
    a test hook: a callable ``phase_values -> (loss, grad_values)`` replacing
    the DKO objective (used to validate the harness itself against losses
    with known exact derivatives).

    Relative error uses ``|a - d| / max(|a|, |d|, floor)`` with a floor of
    ``1e-12 * max(1, max |grad|)`` so that probes where both derivatives
    vanish do not produce 0/0.
    """
    if n_probes < 1:
        raise ValidationError("n_probes must be >= 1")
    if not (step > 0):
        raise ValidationError("step must be > 0")

    if loss_fn is None:
        chirp = propagation_chirp(phase.grid, config)
        t = target.values
        T = aperture.transmittance

        def loss_fn(phi):
            f, F, h = raw_forward(phi, T, chirp)
            alpha = fit_gain_joint([h], [t]) if fit_gain else 1.0
            r = alpha * h - t
            return float(np.vdot(r, r).real), raw_phase_grad(f, F, (2.0 * alpha) * r)

    base = np.array(phase.values, dtype=np.float64)
    _, grad = loss_fn(base)

    interior = np.argwhere(aperture.transmittance > 0)
    if interior.size == 0:
        raise ValidationError("aperture has no open samples to probe")
    rng = np.random.default_rng(seed)
    picks = interior[rng.integers(0, len(interior), size=n_probes)]

    floor = 1e-12 * max(1.0, float(np.abs(grad).max()))
    worst = 0.0
    for iy, ix in picks:
        bumped = base.copy()
        bumped[iy, ix] = base[iy, ix] + step
        lp, _ = loss_fn(bumped)
        bumped[iy, ix] = base[iy, ix] - step
        lm, _ = loss_fn(bumped)
        fd = (lp - lm) / (2.0 * step)
        a = grad[iy, ix]
        err = abs(a - fd) / max(abs(a), abs(fd), floor)
        worst = max(worst, err)
    return worst
