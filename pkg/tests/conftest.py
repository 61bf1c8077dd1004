import numpy as np
import pytest

from trajcluster.core import Dataset, Trajectory
from trajcluster.synthgen import GeneratorConfig, generate_biweekly


@pytest.fixture(scope="session")
def small_synth():
    """120 synthetic patients on the biweekly grid, with true labels."""
    return generate_biweekly(GeneratorConfig(n_patients=120, seed=11))


def make_dataset(Y, times=None, prefix="s"):
    Y = np.asarray(Y, dtype=float)
    t = np.arange(Y.shape[1], dtype=float) if times is None else np.asarray(times, dtype=float)
    return Dataset(tuple(Trajectory(f"{prefix}{i:03d}", t, row) for i, row in enumerate(Y)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
