import numpy as np
import pytest
import torch

from fixelfit.acquisition import synthetic_scheme

torch.set_num_threads(max(1, (torch.get_num_threads() or 4)))


@pytest.fixture(scope="session")
def small_scheme():
    """Two-shell scheme, 17 measurements; shared to avoid re-relaxation."""
    return synthetic_scheme([1000.0, 2500.0], 8, 1, seed=11)


@pytest.fixture(scope="session")
def benchmark_scheme_193():
    """The full 3-shell 193-measurement scheme used by the benchmark."""
    return synthetic_scheme([1000.0, 2000.0, 3000.0], 64, 1, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
