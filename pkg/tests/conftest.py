import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def pytest_addoption(parser):
    parser.addoption(
        "--cifar-dir",
        default=os.path.join(REPO, "data", "cifar-10-batches-bin"),
        help="directory holding the CIFAR-10 binary batches (data_batch_*.bin, test_batch.bin)",
    )


@pytest.fixture
def cifar_dir(request):
    return request.config.getoption("--cifar-dir")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
