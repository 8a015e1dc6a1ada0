import numpy as np
import pytest

from star.config import RunConfig


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_cfg():
    """Small everything: fast rollouts for structural tests."""
    return RunConfig(
        window_len=8, n_channels=6, n_classes=3, n_agents=2, episode_len=3,
        mc_copies=2, enc_glimpse_width=10, enc_loc_width=10, enc_out_width=12,
        conv_filters=4, core_width=16, seed=3,
    )


@pytest.fixture
def default_shape_cfg():
    """The documented default geometry (20 x 23 windows, 12 classes)."""
    return RunConfig()
