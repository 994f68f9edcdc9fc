"""Shared fixtures for the test suite."""

import sys
from pathlib import Path

import numpy as np
import pytest

# Add src to path for imports
sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from core.models import SgldConfig, TrainConfig
from core.tensor_diff import MlpArchitecture, ParamVector


@pytest.fixture
def rng():
    """Fixed-seed random stream."""
    return np.random.default_rng(20240611)


@pytest.fixture
def small_arch():
    """Two hidden layers, two heads with different class counts."""
    return MlpArchitecture(3, (4, 3), {1: 3, 2: 2})


@pytest.fixture
def random_params(small_arch, rng):
    return ParamVector(rng.normal(0.0, 0.7, small_arch.num_params), small_arch.layout)


@pytest.fixture
def quick_train_config():
    """Small, fast settings for trainer tests on synthetic streams."""
    return TrainConfig(method="BGR", lr=1e-2, epochs=2, batch_size=64, posterior_samples=2, seed=3)


@pytest.fixture
def quick_sgld_config():
    return SgldConfig(steps=5, chain_batch=16, buffer_size=64)
