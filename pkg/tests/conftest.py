import numpy as np
import pytest
from hypothesis import settings

from maxtomo.constants import angular_frequency, DEFAULT_FREQUENCY_HZ, wavenumber

settings.register_profile("default", deadline=None, max_examples=25)
settings.load_profile("default")

OMEGA = angular_frequency(DEFAULT_FREQUENCY_HZ)
K0 = wavenumber(OMEGA)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
