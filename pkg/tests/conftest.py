import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from mscnn import backend


def pytest_addoption(parser):
    parser.addoption("--backend", default=None,
                     help="force a kernel backend for the whole run (numba|numpy)")


@pytest.fixture(params=["numba", "numpy"])
def any_backend(request):
    """Run a test under each kernel backend."""
    forced = request.config.getoption("--backend")
    if forced and request.param != forced:
        pytest.skip(f"backend forced to {forced}")
    old = backend.backend_name()
    backend.set_backend(request.param)
    yield request.param
    backend.set_backend(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
