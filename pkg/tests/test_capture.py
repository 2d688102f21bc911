import numpy as np
import pytest

from metaforge.capture import (
    CaptureConfig,
    FeatureMap,
    SceneImage,
    bin_and_stride,
    compose_feature,
    electronic_conv,
    render_measurement,
    simulate_capture,
)
from metaforge.errors import ValidationError
from metaforge.kernels import SignedKernel, delta_kernel, plan_array, split_signed


def naive_conv_valid(scene: np.ndarray, taps: np.ndarray) -> np.ndarray:
    """Nested-loop true convolution, 'valid' region."""
    ky, kx = taps.shape
    oy, ox = scene.shape[0] - ky + 1, scene.shape[1] - kx + 1
    flipped = taps[::-1, ::-1]
    out = np.zeros((oy, ox))
    for i in range(oy):
        for j in range(ox):
            out[i, j] = (scene[i:i + ky, j:j + kx] * flipped).sum()
    return out


def test_delta_psf_reproduces_scene_interior(rng):
    scene = rng.random((12, 12))
    taps = np.zeros((3, 3))
    taps[1, 1] = 1.0
    out = render_measurement(scene, taps)
    assert np.allclose(out, scene[1:-1, 1:-1], atol=1e-12)


def test_uniform_scene_constant_response(rng):
    taps = rng.random((5, 5))
    scene = np.full((16, 16), 2.5)
    out = render_measurement(scene, taps)
    assert np.allclose(out, 2.5 * taps.sum(), rtol=1e-12)


def test_fft_path_matches_naive_oracle(rng):
    for _ in range(5):
        scene = rng.random((16, 16))
        taps = rng.random((3, 3))
        got = render_measurement(scene, taps)
        want = naive_conv_valid(scene, taps)
        assert np.abs(got - want).max() <= 1e-10 * np.abs(want).max()


def test_psf_larger_than_scene_rejected(rng):
    with pytest.raises(ValidationError):
        render_measurement(rng.random((4, 4)), rng.random((5, 5)))


def test_compose_exact_halves_equals_signed_conv(rng):
    for _ in range(10):
        scene_arr = rng.random((20, 20))
        kern = SignedKernel(rng.standard_normal((5, 5)))
        halves = split_signed(kern)
        plus = render_measurement(scene_arr, halves.plus)
        minus = render_measurement(scene_arr, halves.minus)
        feat = compose_feature(plus, minus, gain=1.0)
        want = electronic_conv(SceneImage(scene_arr[None]), [kern]).values[0]
        assert np.abs(feat - want).max() <= 1e-12 * np.abs(want).max()


def test_compose_gain_scales_inversely(rng):
    plus, minus = rng.random((6, 6)), rng.random((6, 6))
    base = compose_feature(plus, minus, gain=1.0)
    scaled = compose_feature(plus, minus, gain=4.0)
    assert np.allclose(scaled, base / 4.0, rtol=1e-15)


def test_compose_zero_gain_rejected(rng):
    with pytest.raises(ValidationError):
        compose_feature(rng.random((4, 4)), rng.random((4, 4)), gain=0.0)


def test_electronic_identity_kernel(rng):
    scene = SceneImage(rng.random((1, 10, 10)))
    out = electronic_conv(scene, [delta_kernel(3)])
    assert np.allclose(out.values[0], scene.values[0, 1:-1, 1:-1], atol=1e-12)


def test_electronic_stride_shape_law(rng):
    scene = SceneImage(rng.random((1, 21, 21)))
    kern = SignedKernel(rng.standard_normal((5, 5)))
    for stride in (1, 2, 3):
        out = electronic_conv(scene, [kern], stride=stride)
        expected = (21 - 5) // stride + 1
        assert out.values.shape == (1, expected, expected)


def test_electronic_matches_brute_force_multichannel(rng):
    scene = SceneImage(rng.random((3, 12, 12)))
    kerns = [SignedKernel(rng.standard_normal((3, 3)), channel=c)
             for c in ("R", "G", "B")] * 2
    out = electronic_conv(scene, kerns)
    for l in range(2):
        want = sum(naive_conv_valid(scene.values[c], kerns[3 * l + c].taps)
                   for c in range(3))
        assert np.abs(out.values[l] - want).max() <= 1e-12 * np.abs(want).max()


def test_electronic_zero_padding_keeps_shape(rng):
    scene = SceneImage(rng.random((1, 10, 10)))
    kern = SignedKernel(rng.standard_normal((3, 3)))
    out = electronic_conv(scene, [kern], padding="zero")
    assert out.values.shape == (1, 10, 10)
    interior = electronic_conv(scene, [kern], padding="valid").values[0]
    assert np.allclose(out.values[0, 1:-1, 1:-1], interior, atol=1e-12)


def test_flip_convention_pinned(rng):
    from scipy.signal import correlate2d

    scene_arr = rng.random((10, 10))
    scene = SceneImage(scene_arr[None])
    asym = SignedKernel(rng.standard_normal((3, 3)))
    sym = SignedKernel((asym.taps + asym.taps[::-1, ::-1]) / 2)

    conv_out = electronic_conv(scene, [asym]).values[0]
    corr_out = correlate2d(scene_arr, asym.taps, mode="valid")
    # true convolution == cross-correlation with the flipped kernel ...
    assert np.allclose(conv_out, correlate2d(scene_arr, asym.taps[::-1, ::-1],
                                             mode="valid"), atol=1e-10)
    # ... and differs from plain cross-correlation for asymmetric kernels
    assert not np.allclose(conv_out, corr_out, atol=1e-6)
    # symmetric kernels: both conventions agree, and the optical render agrees too
    sym_conv = electronic_conv(scene, [sym]).values[0]
    assert np.allclose(sym_conv, correlate2d(scene_arr, sym.taps, mode="valid"),
                       atol=1e-10)
    halves = split_signed(sym)
    optical = compose_feature(render_measurement(scene_arr, halves.plus),
                              render_measurement(scene_arr, halves.minus), 1.0)
    assert np.allclose(optical, sym_conv, atol=1e-10)


def test_bin_and_stride_identity(rng):
    m = rng.random((8, 8))
    assert np.array_equal(bin_and_stride(m, 1, 1), m)


def test_bin_mean_of_ones():
    out = bin_and_stride(np.ones((4, 4)), samples_per_tap=2)
    assert np.array_equal(out, np.ones((2, 2)))


def test_bin_shape_law_and_truncation_warning(rng):
    m = rng.random((9, 9))
    with pytest.warns(UserWarning, match="truncating"):
        out = bin_and_stride(m, samples_per_tap=2, stride=2)
    assert out.shape == (2, 2)  # floor(9/2)=4 binned, then stride 2


def test_noise_is_seeded_and_reproducible(rng):
    plus, minus = rng.random((8, 8)) * 100, rng.random((8, 8)) * 100
    cfg = CaptureConfig(noise="gaussian", noise_sigma=0.5, seed=77)
    a = compose_feature(plus, minus, 1.0, cfg)
    b = compose_feature(plus, minus, 1.0, cfg)
    assert np.array_equal(a, b)
    other = compose_feature(plus, minus, 1.0, CaptureConfig(noise="gaussian",
                                                            noise_sigma=0.5, seed=78))
    assert not np.array_equal(a, other)
    pois = compose_feature(plus, minus, 1.0,
                           CaptureConfig(noise="poisson", poisson_scale=10.0, seed=5))
    assert np.array_equal(pois, compose_feature(
        plus, minus, 1.0, CaptureConfig(noise="poisson", poisson_scale=10.0, seed=5)))


def test_no_noise_is_deterministic_and_noise_free(rng):
    plus, minus = rng.random((8, 8)), rng.random((8, 8))
    cfg = CaptureConfig()
    assert np.array_equal(compose_feature(plus, minus, 2.0, cfg),
                          (plus - minus) / 2.0)


def test_quantization_lands_on_lattice(rng):
    plus, minus = rng.random((8, 8)), rng.random((8, 8))
    cfg = CaptureConfig(quantization_bits=4)
    out = compose_feature(plus, minus, 1.0, cfg)
    lo, hi = out.min(), out.max()
    step = (hi - lo) / (2 ** 4 - 1)
    levels = (out - lo) / step
    assert np.allclose(levels, np.round(levels), atol=1e-9)


def test_scene_validation():
    with pytest.raises(ValidationError):
        SceneImage(np.full((1, 4, 4), -1.0))
    with pytest.raises(ValidationError):
        SceneImage(np.zeros((2, 4, 4)))
    with pytest.raises(ValidationError):
        SceneImage.from_array(np.zeros((4, 4, 2)))
    rgb = SceneImage.from_array(np.zeros((4, 5, 3)))
    assert rgb.values.shape == (3, 4, 5)


def test_electronic_channel_mismatch(rng):
    scene = SceneImage(rng.random((1, 8, 8)))
    kerns = [SignedKernel(rng.standard_normal((3, 3)), channel=c)
             for c in ("R", "G", "B")]
    with pytest.raises(ValidationError):
        electronic_conv(scene, kerns)


def test_simulate_capture_matches_manual_pipeline(rng):
    plan = plan_array(2, "mono-signed")
    scene = SceneImage(rng.random((1, 16, 16)))
    psf_pairs = [(rng.random((3, 3)), rng.random((3, 3))) for _ in range(2)]
    cfg = CaptureConfig(gains=(2.0, 0.5))
    feat = simulate_capture(scene, psf_pairs, plan, cfg)
    for l in range(2):
        want = compose_feature(render_measurement(scene.values[0], psf_pairs[l][0]),
                               render_measurement(scene.values[0], psf_pairs[l][1]),
                               cfg.gains[l])
        assert np.array_equal(feat.values[l], want)


def test_simulate_capture_rgb_sums_colors(rng):
    plan = plan_array(1, "rgb-signed")
    scene = SceneImage(rng.random((3, 12, 12)))
    psf_pairs = [(rng.random((3, 3)), rng.random((3, 3))) for _ in range(3)]
    feat = simulate_capture(scene, psf_pairs, plan, CaptureConfig())
    want = sum(
        compose_feature(render_measurement(scene.values[c], psf_pairs[c][0]),
                        render_measurement(scene.values[c], psf_pairs[c][1]), 1.0)
        for c in range(3)
    )
    assert np.allclose(feat.values[0], want, atol=1e-12)


def test_feature_map_validation():
    with pytest.raises(ValidationError):
        FeatureMap(np.zeros((4, 4)))
    with pytest.raises(ValidationError):
        FeatureMap(np.full((1, 4, 4), np.inf))
