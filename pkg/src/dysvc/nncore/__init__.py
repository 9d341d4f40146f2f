"""Minimal differentiable numeric substrate built on numpy."""
from . import tensor as ops
from .checkpoint import IntegrityError
from .gradcheck import gradient_check
from .layers import (
    DegenerateMaskError,
    DimensionError,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    causal_mask,
    dropout,
    layer_norm,
    scaled_dot_attention,
    sinusoid_positions,
)
from .optim import MissingGradientError, OptimizerState, adam_step, grad_norm, zero_grads
from .tensor import NonFiniteError, Tensor, default_dtype, no_grad

__all__ = [
    "DegenerateMaskError",
    "DimensionError",
    "Embedding",
    "FeedForward",
    "IntegrityError",
    "LayerNorm",
    "Linear",
    "MissingGradientError",
    "Module",
    "MultiHeadAttention",
    "NonFiniteError",
    "OptimizerState",
    "Parameter",
    "Tensor",
    "adam_step",
    "causal_mask",
    "default_dtype",
    "dropout",
    "grad_norm",
    "gradient_check",
    "layer_norm",
    "no_grad",
    "ops",
    "scaled_dot_attention",
    "sinusoid_positions",
    "zero_grads",
]
