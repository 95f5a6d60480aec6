import os

import numpy as np
import pytest
import torch

torch.set_num_threads(int(os.environ.get("CDCN_THREADS", "1")))
torch.use_deterministic_algorithms(True)


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
