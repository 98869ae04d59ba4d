import numpy as np
import pytest

from dhc.synthdata import PhantomSpec


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_spec():
    return PhantomSpec(dims=(12, 12, 12), num_classes=3, target_fractions=[0.9, 0.08, 0.02],
                       shape_kinds=["sphere", "sphere", "box"], intensity_means=[0.0, 0.5, 1.0],
                       noise_sigma=0.1, seed=7)
