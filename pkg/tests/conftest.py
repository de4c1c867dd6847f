import numpy as np
import pytest

from feddiffuse.data import synthetic_fashion
from feddiffuse.diffusion import build_schedule
from feddiffuse.model import ModelConfig

# P = 2409, no padding, double precision: small enough for full finite-difference checks
TINY = ModelConfig(base_channels=4, depth=1, emb_dim=4, image_size=4, pad=0, groups=2, dtype="float64")
# exercises padding and three levels on 12x12 images, still fast
SMALL = ModelConfig(base_channels=4, depth=3, emb_dim=8, image_size=12, pad=2, groups=2, dtype="float64")


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def small_config():
    return SMALL


@pytest.fixture(scope="session")
def default_schedule():
    return build_schedule(1000, 1e-4, 0.02)


@pytest.fixture(scope="session")
def short_schedule():
    return build_schedule(20, 1e-3, 0.2)


@pytest.fixture(scope="session")
def small_images():
    """120 synthetic 12x12 images."""
    return synthetic_fashion(120, seed=3, size=12)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
