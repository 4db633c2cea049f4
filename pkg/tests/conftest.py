import os

import numpy as np
import pytest

os.environ.setdefault("MPLBACKEND", "Agg")


@pytest.fixture(scope="session")
def small_synth():
    from latsep.data import make_synthetic

    return make_synthetic(400, seed=123)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
