import numpy as np
import pytest

from trailbrake.params import VehicleParams


@pytest.fixture(scope="session")
def params() -> VehicleParams:
    p = VehicleParams()
    p.validate()
    return p


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
