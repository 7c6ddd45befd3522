import os
from pathlib import Path

import hypothesis
import numpy as np
import pytest
import torch

from sam3unet.data import make_synthetic
from sam3unet.encoder import TOY_ENCODER
from sam3unet.model import build_model

np.seterr(all="warn")

hypothesis.settings.register_profile("fast", max_examples=10, deadline=None)
hypothesis.settings.register_profile("thorough", max_examples=200, deadline=None)
hypothesis.settings.load_profile(os.getenv("HYPOTHESIS_PROFILE", "fast"))


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture
def toy_model():
    return build_model(TOY_ENCODER)


@pytest.fixture
def synthetic_root(tmp_path: Path) -> Path:
    root = tmp_path / "synthetic"
    make_synthetic(root, 4, size=84, seed=0)
    return root
