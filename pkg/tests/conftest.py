import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_image(rng, h=16, w=16):
    return rng.uniform(0.0, 1.0, size=(h, w, 3)).astype(np.float32)
