import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

# Determinism checks compare runs bit-for-bit; multi-threaded BLAS reductions
# can reorder float sums, so the whole suite runs single-threaded.
torch.set_num_threads(1)

settings.register_profile(
    "suite",
    max_examples=25,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("suite")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
