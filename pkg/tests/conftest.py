import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1337)


def random_matrix(rng, m, n):
    return rng.uniform(-1.0, 1.0, size=(m, n)).astype(np.float32)


@pytest.fixture
def mat():
    return random_matrix
