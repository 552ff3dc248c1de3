import dataclasses

import numpy as np
import pytest

from pieforge.config import default_config


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def small_config():
    """Default pipeline config shrunk for fast harness tests."""
    cfg = default_config()
    harness = dataclasses.replace(cfg.harness, frames_per_epoch=15, epochs=3)
    return dataclasses.replace(cfg, harness=harness)
