import numpy as np
import pytest

from copforge.experiments import ensure_pelvis
from copforge.synthgait import SynthGaitConfig, generate_recording


@pytest.fixture(scope="session")
def small_recording():
    """60 s noisy recording with the default mixed protocol."""
    return generate_recording(SynthGaitConfig(duration_s=60.0, seed=7))


@pytest.fixture(scope="session")
def small_pelvis(small_recording):
    return ensure_pelvis(small_recording)


@pytest.fixture(scope="session")
def clean_recording_truth():
    """Noise-free 30 s recording plus its generating internals."""
    cfg = SynthGaitConfig(duration_s=30.0, seed=5, noise_frac=0.0)
    return generate_recording(cfg, return_truth=True)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)
