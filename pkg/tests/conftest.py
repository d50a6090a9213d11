import numpy as np
import pytest

from glyphforge import ndgrad
from glyphforge.trainer import TrainConfig


@pytest.fixture(autouse=True)
def _deterministic():
    ndgrad.set_deterministic(True)
    yield


@pytest.fixture
def toy_config():
    """Small side-32 configuration used across trainer/CLI tests."""
    return TrainConfig(
        side=32,
        g_depth=5,
        g_base_channels=8,
        g_channel_cap=64,
        d_levels=2,
        d_base_channels=8,
        batch_size=4,
        epochs=1,
        seed=1234,
        checkpoint_interval=100,
        sample_interval=100,
    )


@pytest.fixture
def rng64():
    return np.random.default_rng(640)
