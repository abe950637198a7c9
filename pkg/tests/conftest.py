import numpy as np
import pytest

from fodloc.imaging import ImagePatch


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_patch(rng, h=32, w=32):
    return ImagePatch(rng.uniform(0.0, 1.0, size=(h, w, 3)))


@pytest.fixture
def patch_pair(rng):
    return random_patch(rng), random_patch(rng)
