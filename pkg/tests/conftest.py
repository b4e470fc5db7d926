import numpy as np
import pytest

import featflow


@pytest.fixture(params=["numba", "numpy"])
def both_backends(request):
    """Run the test once per kernel backend."""
    featflow.set_backend(request.param)
    yield request.param
    featflow.set_backend(None)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
