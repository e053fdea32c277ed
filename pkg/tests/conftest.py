import numpy as np
import pytest

from camcov import kernels
from camcov.scene import generate_cube_scene, generate_random_scene

BACKENDS = kernels.available_backends()


@pytest.fixture(scope="session")
def cube():
    return generate_cube_scene(1, 0.5)


@pytest.fixture(scope="session")
def cube_clean():
    return generate_cube_scene(1, 0.0)


@pytest.fixture(scope="session")
def small_scene():
    return generate_random_scene(12, 80, 0.4, seed=5, noise_px=0.5)


@pytest.fixture(params=BACKENDS)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
