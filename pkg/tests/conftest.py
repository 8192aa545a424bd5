import numpy as np
import pytest
from hypothesis import settings

from mtkd.data import SyntheticSpec, generate_synthetic

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def tiny_sets():
    """Small 16x16 train/val/test sets covering the whole CAR range."""
    spec = SyntheticSpec(count=24, size=16, car_range=(0.0, 0.6))
    return (generate_synthetic(spec, 0, "train"),
            generate_synthetic(SyntheticSpec(count=8, size=16), 0, "val"),
            generate_synthetic(SyntheticSpec(count=10, size=16), 0, "test"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
