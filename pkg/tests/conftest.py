import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))  # make oracles importable

from petseg.volume import Volume3D, VolumeKind


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_volume(rng, shape=(5, 6, 7), spacing=(2.0, 1.5, 3.0), kind=VolumeKind.PET_SUV,
                  lo=0.0, hi=10.0):
    data = rng.uniform(lo, hi, size=shape)
    return Volume3D(data, spacing, kind)
