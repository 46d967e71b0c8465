"""Desk-scale expert-parallel Mixture-of-Experts inference cluster."""
from __future__ import annotations

from .model import ModelConfig, generate_reference, init_weights
from .perfmodel import PerfParams, estimate
from .runtime import ClusterConfig, all_reduce, run_cluster

__all__ = [
    "ClusterConfig",
    "ModelConfig",
    "PerfParams",
    "all_reduce",
    "estimate",
    "generate_reference",
    "init_weights",
    "run_cluster",
]
__version__ = "0.1.0"
