import numpy as np
import pytest

from metaforge.fieldcore import GridSpec, OpticalConfig, make_circular_aperture


@pytest.fixture
def optical():
    return OpticalConfig(wavelength_m=532e-9, sensor_distance_m=0.01)


@pytest.fixture
def grid16():
    return GridSpec(16, 16, 2.5e-6)


@pytest.fixture
def aperture16(grid16):
    return make_circular_aperture(grid16, grid16.extent_x_m)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
