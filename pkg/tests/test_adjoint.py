import numpy as np
import pytest

from metaforge.adjoint import (
    dko_grad,
    dko_loss,
    dko_loss_and_grad,
    fd_check,
    fit_gain_joint,
    forward_psf,
    pair_loss_and_grad,
)
from metaforge.errors import ValidationError
from metaforge.fieldcore import GridSpec, PhaseProfile, make_circular_aperture
from metaforge.kernels import EmbeddedTarget, embed_target, gaussian_kernel, split_signed
from metaforge.propagate import propagation_chirp

from test_propagate import brute_force_psf


def random_target(grid, optical, rng, aperture=None, scale=1.0):
    sensor = forward_psf(
        PhaseProfile(grid, np.zeros(grid.shape)),
        aperture if aperture is not None else make_circular_aperture(grid, grid.extent_x_m),
        optical,
    ).sensor
    half = scale * split_signed(gaussian_kernel(5, 1.2)).plus
    return embed_target(half, sensor, 1)


def random_phase(grid, rng):
    return PhaseProfile(grid, rng.uniform(-np.pi, np.pi, grid.shape))


def test_loss_zero_at_exact_match_power_of_two_gain(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    psf = forward_psf(phase, aperture16, optical)
    target = EmbeddedTarget(psf.sensor, 2.0 * psf.values, footprint_window=16)
    report = dko_loss(phase, aperture16, target, optical, fit_gain=True)
    assert report.gain == 2.0
    assert report.loss == 0.0


def test_loss_zero_at_exact_match_generic_gain(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    psf = forward_psf(phase, aperture16, optical)
    target = EmbeddedTarget(psf.sensor, 1.7 * psf.values, footprint_window=16)
    report = dko_loss(phase, aperture16, target, optical, fit_gain=True)
    assert report.gain == pytest.approx(1.7, rel=1e-12)
    assert report.loss <= 1e-20 * float((target.values ** 2).sum())


def test_zero_target_gives_zero_gain_zero_loss(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    sensor = forward_psf(phase, aperture16, optical).sensor
    target = EmbeddedTarget(sensor, np.zeros(grid16.shape), footprint_window=0)
    report = dko_loss(phase, aperture16, target, optical, fit_gain=True)
    assert report.gain == 0.0
    assert report.loss == 0.0


def test_zero_psf_degenerate_case(grid16, optical, rng):
    closed = make_circular_aperture(grid16, 0.0)
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng)
    report = dko_loss(phase, closed, target, optical, fit_gain=True)
    assert report.gain == 0.0
    assert report.loss == pytest.approx(float((target.values ** 2).sum()), rel=1e-12)


def test_loss_matches_brute_force_oracle(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng)
    chirp_free = aperture16.transmittance * np.exp(1j * phase.values)
    h = brute_force_psf(chirp_free, grid16, optical)  # oracle propagation
    num = den = 0.0
    for hv, tv in zip(h.ravel(), target.values.ravel()):
        num += hv * tv
        den += hv * hv
    alpha = max(0.0, num / den)
    want = 0.0
    for hv, tv in zip(h.ravel(), target.values.ravel()):
        want += (alpha * hv - tv) ** 2
    got = dko_loss(phase, aperture16, target, optical, fit_gain=True).loss
    assert got == pytest.approx(want, rel=1e-10)


def test_gradient_zero_at_zero_loss(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    psf = forward_psf(phase, aperture16, optical)
    target = EmbeddedTarget(psf.sensor, psf.values, footprint_window=16)
    grad = dko_grad(phase, aperture16, target, optical, fit_gain=True)
    assert np.abs(grad.values).max() <= 1e-10


def test_gradient_matches_finite_differences(grid16, aperture16, optical, rng):
    for seed in range(3):
        local = np.random.default_rng(seed)
        phase = random_phase(grid16, local)
        target = random_target(grid16, optical, local)
        err = fd_check(phase, aperture16, target, optical, n_probes=10, step=1e-6,
                       seed=seed)
        assert err < 1e-5


def test_gradient_zero_outside_aperture(grid16, optical, rng):
    aperture = make_circular_aperture(grid16, grid16.extent_x_m / 2)
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng, aperture)
    grad = dko_grad(phase, aperture, target, optical)
    closed = aperture.transmittance == 0
    assert np.abs(grad.values[closed]).max() == 0.0


def test_fd_check_linear_surrogate(grid16, aperture16, optical, rng):
    coeff = rng.standard_normal(grid16.shape)
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng)

    def linear_loss(phi):
        return float((coeff * phi).sum()), coeff

    # linear: truncation is exactly zero, so a roomy step leaves only roundoff
    err = fd_check(phase, aperture16, target, optical, n_probes=10, step=1e-2,
                   loss_fn=linear_loss)
    assert err < 1e-10


def test_fd_truncation_error_grows_with_step(grid16, aperture16, optical):
    # in the truncation-dominated regime (above the ~1e-4 roundoff crossover)
    # the central-difference error scales like step^2
    rng = np.random.default_rng(5)
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng)
    errors = [fd_check(phase, aperture16, target, optical, n_probes=10, step=s, seed=3)
              for s in (1e-3, 1e-2, 1e-1)]
    assert errors[0] < errors[1] < errors[2]


def test_loss_invariant_under_global_phase_shift(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng)
    base = dko_loss(phase, aperture16, target, optical).loss
    shifted = PhaseProfile(grid16, phase.values + 1.234)
    again = dko_loss(shifted, aperture16, target, optical).loss
    assert again == pytest.approx(base, rel=1e-10)


def test_target_scaling_equivariance(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng)
    r1 = dko_loss(phase, aperture16, target, optical, fit_gain=True)
    scaled = EmbeddedTarget(target.sensor, 2.0 * target.values,
                            footprint_window=target.footprint_window)
    r2 = dko_loss(phase, aperture16, scaled, optical, fit_gain=True)
    assert r2.gain == pytest.approx(2.0 * r1.gain, rel=1e-12)
    # a zero-loss phase stays zero-loss and zero-gradient after target scaling
    psf = forward_psf(phase, aperture16, optical)
    exact = EmbeddedTarget(psf.sensor, 2.0 * psf.values, footprint_window=16)
    assert dko_loss(phase, aperture16, exact, optical).loss == 0.0
    assert np.abs(dko_grad(phase, aperture16, exact, optical).values).max() <= 1e-12


def test_pair_shared_gain_is_joint_least_squares(grid16, aperture16, optical, rng):
    chirp = propagation_chirp(grid16, optical)
    phases = (rng.uniform(-1, 1, grid16.shape), rng.uniform(-1, 1, grid16.shape))
    t_plus = random_target(grid16, optical, rng).values
    t_minus = 0.5 * t_plus
    ev = pair_loss_and_grad(phases, aperture16.transmittance, (t_plus, t_minus), chirp)
    psf0, psf1 = ev.psfs
    expected = fit_gain_joint([psf0, psf1], [t_plus, t_minus])
    assert ev.gain == expected
    assert ev.joint_loss == pytest.approx(
        float(((ev.gain * psf0 - t_plus) ** 2).sum()
              + ((ev.gain * psf1 - t_minus) ** 2).sum()), rel=1e-12)


def test_loss_and_grad_single_evaluation_consistency(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    target = random_target(grid16, optical, rng)
    report, grad = dko_loss_and_grad(phase, aperture16, target, optical)
    assert report.loss == dko_loss(phase, aperture16, target, optical).loss
    assert np.array_equal(grad.values, dko_grad(phase, aperture16, target, optical).values)


def test_problem_validation(grid16, aperture16, optical, rng):
    phase = random_phase(grid16, rng)
    other = GridSpec(8, 8, 2.5e-6)
    bad_target = EmbeddedTarget(
        forward_psf(PhaseProfile(other, np.zeros(other.shape)),
                    make_circular_aperture(other, other.extent_x_m), optical).sensor,
        np.zeros(other.shape), footprint_window=0)
    with pytest.raises(ValidationError):
        dko_loss(phase, aperture16, bad_target, optical)
    with pytest.raises(ValidationError):
        fd_check(phase, aperture16, random_target(grid16, optical, rng), optical,
                 n_probes=0)
