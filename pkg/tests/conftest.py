import numpy as np
import pytest

from sparse_ame import lasso


@pytest.fixture(params=lasso.available_backends())
def backend(request):
    """Run the test once per available coordinate-descent kernel."""
    prev = lasso.use_backend(request.param)
    yield request.param
    lasso.use_backend(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
