import numpy as np
import pytest

from distortadapt.imagecore import RandomSource
from distortadapt.scenes import generate_scenes


@pytest.fixture(scope="session")
def corpus20() -> list[np.ndarray]:
    """20 structured 64x64 images for codec and metric tests."""
    return generate_scenes(20, 4, 64, RandomSource(1234, "corpus"), role="train").images()


@pytest.fixture(scope="session")
def scene_split_small():
    """A small train split with annotations, reused across tests."""
    return generate_scenes(10, 3, 64, RandomSource(77, "split"), role="train")
