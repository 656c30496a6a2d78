"""Shared fixtures: a tiny two-layer model and a small shapes dataset."""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from core.data_corruptions import generate_shapes  # noqa: E402
from core.vit import init_weights  # noqa: E402
from models.model_config import ViTConfig  # noqa: E402

TINY = ViTConfig(image_size=8, patch_size=4, d=8, n_layers=2, heads=2, mlp_ratio=2.0, num_classes=3)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_weights():
    return init_weights(TINY, seed=0)


@pytest.fixture
def tiny_images():
    return np.random.default_rng(0).uniform(0.0, 1.0, size=(6, 3, 8, 8))


@pytest.fixture
def tiny_dataset():
    return generate_shapes(12, image_size=8, seed=0, num_classes=3)
