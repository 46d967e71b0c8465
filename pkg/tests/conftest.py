from __future__ import annotations

import os

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.register_profile("ci", deadline=None, max_examples=200)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture(scope="session")
def small_config():
    from moe_cluster.model import ModelConfig

    return ModelConfig(n_layers=2, d_embed=16, d_ffn=24, d_qkv_hidden=16, n_experts=8, top_k=2, vocab_size=64)
