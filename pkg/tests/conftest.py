import numpy as np
import pytest

from kernelscope import benchmarks
from kernelscope.dynamics import SystemSpec, generate_dataset


def constant_kernel(c):
    def kernel(xi, xj):
        return np.full(np.broadcast_shapes(np.shape(xi), np.shape(xj))[:-1], float(c))
    return kernel


@pytest.fixture(scope="session")
def small_data():
    """Modest two-agent datasets for every benchmark, keyed by name."""
    out = {}
    for name in benchmarks.REGISTRY:
        b = benchmarks.get(name)
        out[name] = (b, generate_dataset(b.system(seed=11, n_sub=20), 400))
    return out


@pytest.fixture
def pl():
    return benchmarks.get("pl")


@pytest.fixture
def const_spec():
    return SystemSpec(N=2, d=2, T=1.0, L=5, kernel=constant_kernel(1.0))
