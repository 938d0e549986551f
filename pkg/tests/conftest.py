"""Shared pytest fixtures."""

import logging
from pathlib import Path

import pytest
import torch

from app.core.fusor_model import FusorConfig
from app.logger import logger
from app.pipeline.llm import LlmGateway, RetryPolicy, ScriptedLlmClient

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def small_config() -> FusorConfig:
    """Small fp64-friendly fusor with mixed native channels."""
    return FusorConfig(
        num_encoders=3,
        num_queries=3,
        num_layers=2,
        channels=4,
        height=4,
        width=4,
        heads=2,
        text_dim=5,
        gate_hidden=6,
        out_dim=3,
        encoder_channels=[4, 3, 5],
        seed=0,
    )


@pytest.fixture
def small_inputs(small_config):
    """Native-size encoder maps (varied spatial sizes) and text for small_config."""
    g = torch.Generator().manual_seed(7)
    sizes = [(4, 4), (8, 8), (2, 3)]
    features = [
        torch.randn(2, ch, h, w, generator=g, dtype=torch.float64)
        for ch, (h, w) in zip(small_config.native_channels, sizes)
    ]
    text = torch.randn(2, small_config.text_dim, generator=g, dtype=torch.float64)
    return features, text


@pytest.fixture
def scripted_gateway():
    """Factory: gateway over a ScriptedLlmClient, no sleeping between retries."""

    def make(parallelism: int = 4, cache=None, max_attempts: int = 3, **client_kwargs):
        client = ScriptedLlmClient(**client_kwargs)
        policy = RetryPolicy(max_attempts=max_attempts, backoff_base=0.0, backoff_max=0.0)
        return LlmGateway(client, cache=cache, policy=policy, parallelism=parallelism, sleep=lambda _: None)

    return make


@pytest.fixture
def log_records(caplog):
    """Capture records of the aesfusor logger (it does not propagate to root)."""
    logger.addHandler(caplog.handler)
    caplog.set_level(logging.DEBUG, logger=logger.name)
    yield caplog
    logger.removeHandler(caplog.handler)
