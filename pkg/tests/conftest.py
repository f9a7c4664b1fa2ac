import numpy as np
import pytest

from endomap.synth import band_limited_texture


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def textured():
    """Periodic, smooth random texture; exact under periodic shifts."""
    return band_limited_texture(256, seed=7, scale=10.0, lo=0.2, hi=0.9)


@pytest.fixture
def textured_small():
    return band_limited_texture(128, seed=11, scale=8.0, lo=0.2, hi=0.9)
