import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.manual_seed(0)


@pytest.fixture(autouse=True)
def _deterministic_torch():
    torch.manual_seed(1234)
    yield


@pytest.fixture
def rng():
    import numpy as np

    return np.random.default_rng(7)
