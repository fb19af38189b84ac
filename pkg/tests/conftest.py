import numpy as np
import pytest

from pgap import Seed


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def orthonormal_frame(rng, rows, cols):
    """Random matrix with orthonormal columns (QR of a Gaussian)."""
    q, _ = np.linalg.qr(rng.standard_normal((rows, cols)))
    return q


@pytest.fixture
def frame_maker(rng):
    def make(rows, cols):
        return orthonormal_frame(rng, rows, cols)
    return make


@pytest.fixture
def seed():
    return Seed(0xC0FFEE)
