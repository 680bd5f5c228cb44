"""Test configuration for path setup and shared toy presets."""

import sys
from pathlib import Path

import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))

from config.settings import TOY_MODEL, BackboneConfig  # noqa: E402


@pytest.fixture
def toy_model_cfg():
    return TOY_MODEL


@pytest.fixture
def tiny_backbone_cfg():
    """28px images with 14px patches: a 2x2 token map, four blocks."""
    return BackboneConfig(embed_dim=16, depth=4, heads=2, image_size=28)
