"""Shared fixtures: the default template and rig, a tiny dataset, a small model config."""

import pytest

from config import GeneratorConfig, TrainConfig
from mesh import template_for
from synthetic_data import default_rig, make_dataset

DATASET_SEED = 7
DATASET_SIZE = 6


@pytest.fixture(scope="session")
def template():
    return template_for()


@pytest.fixture(scope="session")
def generator_config():
    return GeneratorConfig()


@pytest.fixture(scope="session")
def rig(generator_config):
    return default_rig(generator_config)


@pytest.fixture(scope="session")
def dataset_path(tmp_path_factory, rig, generator_config):
    path = tmp_path_factory.mktemp("data") / "tiny.mmtd"
    return make_dataset(DATASET_SIZE, rig, DATASET_SEED, path, generator_config)


@pytest.fixture
def small_config():
    """A model small enough to train for an epoch in a couple of seconds."""
    return TrainConfig().with_overrides(
        epochs=1,
        batch_size=2,
        d=16,
        h=4,
        feature_channels=16,
        dropout=0.0,
        holdout_fraction=0.34,
        seed=3,
    )
