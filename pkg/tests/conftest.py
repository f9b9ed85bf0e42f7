import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("dirl", deadline=None, max_examples=60)
settings.load_profile("dirl")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
