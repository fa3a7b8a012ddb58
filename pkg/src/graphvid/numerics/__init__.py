"""Small numpy tensor library with reverse-mode autodiff."""

from . import functional
from .functional import (cosine_matrix, cross_entropy, layer_norm, log_softmax, logsumexp, mse,
                         scaled_dot_attention, softmax, softmax_rows)
from .gradcheck import grad_check
from .nn import Linear, LayerNorm, Module, Parameter, TransformerLayer, TransformerStack
from .optim import Adam
from .autograd import (NonFiniteError, Tensor, backward, concat, gelu, get_default_dtype, no_grad,
                     precision, set_default_dtype, stack, straight_through, tensor)

__all__ = [
    "Adam", "Linear", "LayerNorm", "Module", "NonFiniteError", "Parameter", "Tensor",
    "TransformerLayer", "TransformerStack", "backward", "concat", "cosine_matrix",
    "cross_entropy", "functional", "gelu", "get_default_dtype", "grad_check", "layer_norm",
    "log_softmax", "logsumexp", "mse", "no_grad", "precision", "scaled_dot_attention",
    "set_default_dtype", "softmax", "softmax_rows", "stack", "straight_through", "tensor",
]
