import numpy as np
import pytest

from iqt import Geometry, PhantomConfig, Volume3D, generate_phantom


@pytest.fixture(scope="session")
def phantom_pair():
    cfg = PhantomConfig(dims=(48, 48, 48), seed=7)
    return generate_phantom(cfg)


@pytest.fixture
def unit_geometry():
    return Geometry.isotropic(1.0)


def random_volume(shape, seed=0, low=1.0, high=2.0, geometry=None):
    rng = np.random.default_rng(seed)
    return Volume3D(
        data=rng.uniform(low, high, size=shape),
        geometry=geometry or Geometry.isotropic(1.0),
    )
