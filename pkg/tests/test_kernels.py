import numpy as np
import pytest

from metaforge.errors import ValidationError
from metaforge.kernels import (
    ArrayPlan,
    SignedKernel,
    delta_kernel,
    dog_kernel,
    embed_target,
    export_first_layer,
    gaussian_kernel,
    import_first_layer,
    load_plan,
    plan_array,
    save_plan,
    split_signed,
)
from metaforge.propagate import SensorGrid


def test_split_definition_example():
    taps = np.array([[1.0, -2.0, 3.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
    halves = split_signed(SignedKernel(taps))
    assert np.array_equal(halves.plus[0], [1.0, 0.0, 3.0])
    assert np.array_equal(halves.minus[0], [0.0, 2.0, 0.0])


def test_split_nonnegative_kernel_has_zero_minus():
    halves = split_signed(gaussian_kernel(7, 1.5))
    assert halves.minus.sum() == 0.0


def test_split_reconstruction_is_exact(rng):
    for _ in range(20):
        taps = rng.standard_normal((5, 5))
        kern = SignedKernel(taps)
        halves = split_signed(kern)
        assert np.array_equal(halves.reconstruct(), kern.taps)
        assert (halves.plus >= 0).all() and (halves.minus >= 0).all()
        assert not np.any(halves.plus * halves.minus)  # disjoint support


def test_kernel_validation():
    with pytest.raises(ValidationError):
        SignedKernel(np.zeros((4, 4)))  # even
    with pytest.raises(ValidationError):
        SignedKernel(np.zeros((3, 5)))  # not square
    with pytest.raises(ValidationError):
        SignedKernel(np.full((3, 3), np.nan))
    with pytest.raises(ValidationError):
        SignedKernel(np.zeros((3, 3)), channel="X")


def test_plan_counts():
    assert len(plan_array(64, "rgb-signed")) == 384
    assert len(plan_array(1, "mono-signed")) == 2
    assert len(plan_array(10, "rgb-signed")) == 60


def test_plan_rejects_bad_inputs():
    with pytest.raises(ValidationError):
        plan_array(0, "rgb-signed")
    with pytest.raises(ValidationError):
        plan_array(4, "cmyk")


def test_plan_ordering_channel_major_color_sign():
    plan = plan_array(2, "rgb-signed")
    triples = [(e.out_channel, e.color, e.sign) for e in plan.elements[:7]]
    assert triples == [
        (0, "R", 1), (0, "R", -1), (0, "G", 1), (0, "G", -1),
        (0, "B", 1), (0, "B", -1), (1, "R", 1),
    ]
    assert [e.index for e in plan.elements] == list(range(12))


def test_plan_round_trip_preserves_order(tmp_path):
    plan = plan_array(3, "rgb-signed")
    path = tmp_path / "plan.json"
    save_plan(plan, path)
    again = load_plan(path)
    assert again == plan


def test_embed_delta_center():
    sensor = SensorGrid(9, 9, 1e-6)
    half = np.zeros((3, 3))
    half[1, 1] = 1.0
    target = embed_target(half, sensor, samples_per_tap=1)
    assert target.values[4, 4] == 1.0
    assert target.values.sum() == 1.0
    assert target.footprint_window == 3


def test_embed_preserves_mass(rng):
    sensor = SensorGrid(32, 32, 1e-6)
    for spt in (1, 2, 3):
        half = rng.random((5, 5))
        target = embed_target(half, sensor, samples_per_tap=spt)
        assert target.values.sum() == pytest.approx(half.sum(), rel=1e-12)
        # support strictly inside the footprint window
        w = target.footprint_window
        oy = 16 - w // 2
        outside = target.values.copy()
        outside[oy:oy + w, oy:oy + w] = 0.0
        assert outside.sum() == 0.0


def test_embed_block_expansion():
    sensor = SensorGrid(12, 12, 1e-6)
    target = embed_target(np.ones((3, 3)), sensor, samples_per_tap=2)
    window = target.values[3:9, 3:9]
    assert np.array_equal(window, np.full((6, 6), 0.25))


def test_embed_bounds_and_validation():
    sensor = SensorGrid(8, 8, 1e-6)
    with pytest.raises(ValidationError):
        embed_target(np.ones((5, 5)), sensor, samples_per_tap=2)
    with pytest.raises(ValidationError):
        embed_target(np.full((3, 3), -1.0), sensor)
    with pytest.raises(ValidationError):
        embed_target(np.ones((3, 3)), sensor, samples_per_tap=0)


def test_import_first_layer_counts(rng):
    tensor = rng.standard_normal((64, 3, 7, 7))
    kerns = import_first_layer(tensor, tap_pitch_m=2e-6)
    assert len(kerns) == 192
    halves = [h for k in kerns for h in (split_signed(k).plus, split_signed(k).minus)]
    assert len(halves) == 384
    assert [k.channel for k in kerns[:4]] == ["R", "G", "B", "R"]


def test_import_flips_to_convolution_orientation():
    taps = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
    kern = import_first_layer(taps, tap_pitch_m=1.0)[0]
    assert np.array_equal(kern.taps, taps[0, 0, ::-1, ::-1])


def test_import_export_round_trip(rng):
    tensor = rng.standard_normal((4, 3, 5, 5))
    kerns = import_first_layer(tensor, tap_pitch_m=1.0)
    assert np.array_equal(export_first_layer(kerns), tensor)


def test_import_single_channel_delta():
    tensor = np.zeros((1, 1, 5, 5))
    tensor[0, 0, 2, 2] = 1.0
    kern = import_first_layer(tensor, tap_pitch_m=1.0)[0]
    assert kern.channel == "mono"
    assert split_signed(kern).minus.sum() == 0.0


def test_import_rejects_unsupported_shapes(rng):
    with pytest.raises(ValidationError):
        import_first_layer(rng.standard_normal((2, 3, 4, 4)), 1.0)  # even k
    with pytest.raises(ValidationError):
        import_first_layer(rng.standard_normal((2, 2, 5, 5)), 1.0)  # C=2
    with pytest.raises(ValidationError):
        import_first_layer(rng.standard_normal((2, 3, 5)), 1.0)  # not 4-D


def test_factory_kernels():
    g = gaussian_kernel(11, 1.8)
    assert g.taps.max() == 1.0 and g.taps.min() >= 0.0
    d = delta_kernel(11)
    assert d.taps.sum() == 1.0 and d.taps[5, 5] == 1.0
    dog = dog_kernel(11, 1.2, 2.5)
    assert dog.taps.min() < 0 < dog.taps.max()
    assert abs(dog.taps.sum()) < 1e-12 * np.abs(dog.taps).sum()  # zero DC


def test_plan_as_dict_is_json_stable():
    plan = plan_array(1, "mono-signed")
    d = plan.as_dict()
    assert d["elements"][0] == {"index": 0, "out_channel": 0, "color": "mono",
                                "sign": "+", "m": 0, "n": 0}
    assert ArrayPlan.from_dict(d) == plan
