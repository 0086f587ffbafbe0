import numpy as np
import pytest

from cellvis.autograd import set_debug, set_default_dtype


@pytest.fixture(autouse=True)
def _engine_defaults():
    """64-bit tensors and fail-fast NaN checks in every test."""
    set_default_dtype(np.float64)
    set_debug(True)
    yield
    set_debug(False)
    set_default_dtype(np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
