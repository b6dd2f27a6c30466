"""Desk-scale training lab: synthetic corpus, tiny decoder-only transformer,
deterministic AdamW training with checkpointing, and the fork-experiment
runner."""

from .corpus import synth_corpus, train_validation_split, transition_table
from .model import TinyLM, TinyLMConfig, init_model, forward_loss, model_from_checkpoint
from .train import AdamWConfig, RunConfig, train, fork, ForkResult

__all__ = [
    "synth_corpus", "train_validation_split", "transition_table",
    "TinyLM", "TinyLMConfig", "init_model", "forward_loss", "model_from_checkpoint",
    "AdamWConfig", "RunConfig", "train", "fork", "ForkResult",
]
