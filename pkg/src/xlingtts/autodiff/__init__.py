from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_gradient, relative_error
from .nn import (
    ConditionalLayerNorm,
    Conv1d,
    ConvStack,
    Embedding,
    LayerNorm,
    LConvBlock,
    LConvBlockConfig,
    Linear,
    Module,
    Parameter,
)
from .optim import Adam, AdamState, adam_step
from .tensor import (
    ShapeError,
    Tensor,
    UsageError,
    absolute,
    clip,
    concat,
    conv1d,
    cross_entropy,
    embedding,
    exp,
    glu,
    grad,
    is_grad_enabled,
    l1_loss,
    layer_norm,
    lightweight_conv,
    log,
    log_softmax,
    masked_mean,
    matmul,
    mse_loss,
    no_grad,
    normalize,
    relu,
    sigmoid,
    softmax,
    tanh,
)


def conditional_layer_norm(x, condition, proj_scale: Linear, proj_bias: Linear, eps: float = 1e-5):
    """Functional form of :class:`ConditionalLayerNorm` with explicit projections."""
    if condition is None:
        raise UsageError("conditional_layer_norm needs a condition")
    return normalize(x, eps) * (proj_scale(condition) + 1.0) + proj_bias(condition)
