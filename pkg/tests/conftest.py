import numpy as np
import pytest
from hypothesis import settings

from ancm.dynamics import CartPole

settings.register_profile("ancm", max_examples=40, deadline=None)
settings.load_profile("ancm")


@pytest.fixture
def cp():
    return CartPole()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
