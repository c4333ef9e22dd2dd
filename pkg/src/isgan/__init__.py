"""Disentangling person images into identity-related and identity-unrelated
part features by identity shuffling, with a synthetic ground-truth benchmark."""

from .disentangle import ShuffleMask, compose, part_shuffle, sample_mask, shuffle_registry
from .model import ISGAN, ModelConfig, PartLayout

__all__ = [
    "ISGAN",
    "ModelConfig",
    "PartLayout",
    "ShuffleMask",
    "compose",
    "part_shuffle",
    "sample_mask",
    "shuffle_registry",
]
__version__ = "0.1.0"
