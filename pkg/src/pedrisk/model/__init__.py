"""Recurrent risk model: embeddings, two-layer LSTM, attention pooling, horizon heads."""
from .config import ModelConfig
from .net import (
    AdamState,
    Batch,
    ModelOutput,
    ModelWeights,
    backward_and_step,
    forward,
    init,
    loss_and_grads,
    loss_single,
    rank_risk_factors,
)
from .serialize import load, save

__all__ = [
    "AdamState",
    "Batch",
    "ModelConfig",
    "ModelOutput",
    "ModelWeights",
    "backward_and_step",
    "forward",
    "init",
    "load",
    "loss_and_grads",
    "loss_single",
    "rank_risk_factors",
    "save",
]
