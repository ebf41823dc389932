"""Orchestration engine and evaluation harness for multi-model collaboration.

Methods span four levels of information exchange: API (routing, cascades,
token-level handoffs), text (debate, feedback, aggregation), logit
(distribution arithmetic) and weight (merging and weight-space search).
"""
__version__ = "0.1.0"

from .core import (GenerationOutput, GenerationParams, MockBackend, MockScript, ModelBackend, ModelDescriptor,
                   ModelPool, TokenDistribution, load_pool)
from .errors import (ArgumentError, CapabilityError, CollabError, ConfigError, FormatError, ShapeError,
                     TransportError, VocabError)
from .tensors import TensorMap, tensor_load, tensor_save

__all__ = [
    "__version__",
    "GenerationOutput", "GenerationParams", "MockBackend", "MockScript", "ModelBackend", "ModelDescriptor",
    "ModelPool", "TokenDistribution", "load_pool",
    "ArgumentError", "CapabilityError", "CollabError", "ConfigError", "FormatError", "ShapeError",
    "TransportError", "VocabError",
    "TensorMap", "tensor_load", "tensor_save",
]
