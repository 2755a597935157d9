import sys
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile(
    "default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_labels(rng, shape=(8, 8, 8), p_fg=0.4):
    lab = rng.integers(1, 4, size=shape).astype(np.uint8)
    lab[rng.random(shape) > p_fg] = 0
    return lab


def blob_mask(rng, shape=(12, 12, 12), n_seeds=4, iterations=2):
    """Random clumpy mask: seeds grown by random dilation."""
    from scipy import ndimage
    m = np.zeros(shape, dtype=bool)
    for _ in range(n_seeds):
        m[tuple(rng.integers(0, s) for s in shape)] = True
    for _ in range(iterations):
        grown = ndimage.binary_dilation(m)
        m |= grown & (rng.random(shape) < 0.6)
    return m
