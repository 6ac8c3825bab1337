"""Minimal 64-bit differentiable function approximation."""

from kgrl.approx import tensor
from kgrl.approx.gradcheck import GradCheckResult, gradient_check
from kgrl.approx.nets import (
    ConvEncoderSpec,
    ConvLayer,
    EmbeddingTable,
    MLPSpec,
    conv_features,
    forward,
    init_conv,
    init_embedding,
    init_mlp,
    orthogonal,
    unit_sphere_rows,
)
from kgrl.approx.optim import Adam, NonFiniteGradient, adam_step
from kgrl.approx.params import BlobError, ParameterStore, blob_bytes, blob_values, load_blob, save_blob
from kgrl.approx.tensor import ShapeError, Tensor, UsageError, no_grad

__all__ = [
    "Adam",
    "BlobError",
    "ConvEncoderSpec",
    "ConvLayer",
    "EmbeddingTable",
    "GradCheckResult",
    "MLPSpec",
    "NonFiniteGradient",
    "ParameterStore",
    "ShapeError",
    "Tensor",
    "UsageError",
    "adam_step",
    "blob_bytes",
    "blob_values",
    "conv_features",
    "forward",
    "gradient_check",
    "init_conv",
    "init_embedding",
    "init_mlp",
    "load_blob",
    "no_grad",
    "orthogonal",
    "save_blob",
    "tensor",
    "unit_sphere_rows",
]
