import os

import pytest
import torch

from clnet.config import EncoderConfig, RunConfig, build_config


def pytest_collection_modifyitems(config, items):
    if os.environ.get("CLNET_RUN_SLOW") == "1":
        return
    skip_slow = pytest.mark.skip(reason="set CLNET_RUN_SLOW=1 to run desk-scale training")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture(autouse=True)
def _no_env_seed(monkeypatch):
    monkeypatch.delenv("CLNET_SEED", raising=False)


@pytest.fixture
def tiny_encoder() -> EncoderConfig:
    """Small enough that a forward pass takes milliseconds."""
    return EncoderConfig(
        stage_channels=[4, 8, 12, 16],
        stage_strides=[2, 2, 2, 2],
        ground_input_hw=(16, 64),
        satellite_input_hw=(32, 32),
    )


@pytest.fixture
def tiny_run(tiny_encoder) -> RunConfig:
    return build_config(
        {
            "encoder": tiny_encoder.model_dump(),
            "train": {"epochs": 2, "batch_size": 4, "seed": 0, "num_threads": 1},
            "data": {"num_train": 8, "num_eval": 8, "seed": 0},
        }
    )


@pytest.fixture
def double_precision():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)
