"""Keyword-to-description generation with entity-label guidance and a keyword memory.

Everything runs on a small tape-based autodiff layer over numpy (``fpdg.tensor``).
"""
from .data import AttributeSchema, Sample, Vocab, default_schema, generate_corpus
from .model import FPDG, ModelConfig
from .training import TrainConfig, train

__all__ = ["AttributeSchema", "Sample", "Vocab", "default_schema", "generate_corpus",
           "FPDG", "ModelConfig", "TrainConfig", "train"]
__version__ = "0.1.0"
