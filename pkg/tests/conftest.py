"""Shared fixtures: small synthetic bundles written under tmp_path."""
import pytest

from src.core.config import ModelConfig
from src.tools.synthetic import SyntheticSpec, synth_generate

# Matches ModelConfig.tiny(): 16×16×3 images, 8-pixel patches, 4 attributes.
TINY_SPEC = SyntheticSpec(
    image_size=16,
    patch_size=8,
    channels=3,
    num_attributes=4,
    seen_classes=3,
    unseen_classes=1,
    samples_per_class=2,
    val_per_class=2,
    test_per_class=3,
    noise=0.05,
    min_distance=0.25,
    seed=0,
    name="tiny",
)


@pytest.fixture
def tiny_spec() -> SyntheticSpec:
    return TINY_SPEC


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig.tiny()


@pytest.fixture
def tiny_bundle(tmp_path):
    return synth_generate(TINY_SPEC, tmp_path / "tiny_bundle")
