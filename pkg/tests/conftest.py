import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from keysched.env import SynthConfig, Trace, gen_trace

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def small_trace():
    return gen_trace(SynthConfig(n_frames=120), seed=11)


@pytest.fixture
def hand_trace():
    # 5 frames, no noise, hand-checkable numbers
    return Trace(key_quality=np.array([0.9, 0.8, 0.85, 0.9, 0.7]),
                 motion=np.array([0.0, 0.5, 1.0, 2.0, 0.25]),
                 alpha=0.1, beta=0.01, quality_floor=0.3, feature_noise_sigma=0.0, seed=3)
