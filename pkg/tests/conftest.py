import numpy as np
import pytest

from nebula import pipeline


@pytest.fixture(scope="session")
def unit_bank():
    """Small trained bank shared by tests that need real model semantics.

    24 channels / 3000 draws / 4 components: the smallest configuration
    that reliably tracks clean tones, complete with calibration table
    and simulated unvoiced statistics.  Takes about a minute once per
    session.
    """
    return pipeline.train_bank(
        n_channels=24, n_samples=3000, n_components=4, seed=42,
        calibration_frames=600, unvoiced_frames=400)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
