import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from crackcnn.tensor import make_rng  # noqa: E402


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture(scope="session")
def small_crack_dir(tmp_path_factory):
    """A tiny on-disk crack2 dataset at full image size."""
    from crackcnn.data import generate_synthetic

    root = tmp_path_factory.mktemp("crack2_small")
    generate_synthetic("crack2", 6, seed=5, out_dir=root)
    return root


def to64(*arrays):
    return [np.asarray(a, dtype=np.float64) for a in arrays]
