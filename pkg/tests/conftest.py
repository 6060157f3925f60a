import numpy as np
import pytest

from fastscan.verify import random_block_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_block_params():
    """Block with dim 4, expansion 2, 4 states, conv width 4."""
    return random_block_params(np.random.default_rng(77))


def make_block_params(seed, **kwargs):
    return random_block_params(np.random.default_rng(seed), **kwargs)
