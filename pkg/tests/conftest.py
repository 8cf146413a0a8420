"""Shared fixtures: tiny networks and a tiny on-disk dataset."""

from pathlib import Path

import pytest
import torch

from insegan.config import DatasetConfig, NetConfig, TrainConfig
from insegan.nets import build_networks
from insegan.scenegen import build_dataset


@pytest.fixture
def tiny_config() -> TrainConfig:
    return TrainConfig(
        n_instances=2,
        batch_size=4,
        epochs=2,
        checkpoint_every=1,
        validate_every=1,
        seed=11,
        nets=NetConfig.reduced(),
    )


@pytest.fixture
def tiny_networks(tiny_config: TrainConfig):
    torch.manual_seed(0)
    return build_networks("3d", tiny_config.nets, tiny_config.n_instances)


@pytest.fixture(scope="session")
def dataset_config() -> DatasetConfig:
    return DatasetConfig(
        shape="box",
        n_instances=2,
        count=12,
        native_size=64,
        base_seed=3,
        val_count=2,
        test_count=2,
    )


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, dataset_config: DatasetConfig) -> Path:
    out = tmp_path_factory.mktemp("dataset")
    build_dataset(dataset_config, out, progress=False)
    return out


@pytest.fixture(scope="session")
def desk_dataset(tmp_path_factory) -> Path:
    """500 overlapping two-box scenes with a 100-scene hard test split."""
    out = tmp_path_factory.mktemp("desk")
    config = DatasetConfig(shape="box", n_instances=2, count=500, base_seed=0, val_count=20,
                           test_count=100, hard_test=True)
    build_dataset(config, out, progress=False)
    return out
