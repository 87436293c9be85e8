import numpy as np
import pytest
import torch

from adaptdet.data import ShiftConfig, generate_benchmark


@pytest.fixture(scope="session")
def tiny_benchmark():
    """Small fog-shifted benchmark shared by pipeline tests (8+8 images, K=3)."""
    return generate_benchmark(8, 8, 3, ShiftConfig("fog", 0.6, seed=3), seed=11)


@pytest.fixture(scope="session")
def tiny_test_benchmark():
    return generate_benchmark(6, 6, 3, ShiftConfig("fog", 0.6, seed=3), seed=12, split="test")


@pytest.fixture(autouse=True)
def _fixed_torch_seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield
