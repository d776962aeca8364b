import sys
from importlib import resources
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dashsplat.spectra import Image


def seeded_image(height, width, channels=1, seed=0, lo=0.0, hi=1.0):
    rng = np.random.default_rng(seed)
    data = lo + (hi - lo) * rng.random((height, width, channels))
    return Image.from_array(data)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def texture_smooth_path(tmp_path_factory):
    return _bundled("texture_smooth.png")


@pytest.fixture(scope="session")
def texture_detail_path():
    return _bundled("texture_detail.png")


def _bundled(name: str) -> Path:
    return Path(resources.files("dashsplat") / "data" / name)
