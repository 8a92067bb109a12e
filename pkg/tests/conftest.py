"""
Shared pytest configuration and fixtures
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent))

from mixquant.models.config import ActKind, ModelConfig, ModelFamily, NormKind  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False,
                     help="run the seeded trend experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: seeded trend experiments (minutes)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_config(family: ModelFamily = ModelFamily.MIXER, **overrides) -> ModelConfig:
    """A model small enough for finite-difference checks"""
    base = dict(family=family, depth=1, image_size=4, in_channels=1, patch_size=2, channels=4,
                token_hidden=3, channel_hidden=5, num_classes=3, groups=1,
                norm=NormKind.LAYERNORM, act=ActKind.GELU, init_std=0.3)
    base.update(overrides)
    return ModelConfig(**base)


@pytest.fixture
def tiny():
    return tiny_config
