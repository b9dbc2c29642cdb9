from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import GradCheckReport, grad_check
from .modules import (
    GELU,
    Dropout,
    EncoderLayer,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    ModuleList,
    MultiHeadSelfAttention,
    Parameter,
    PositionalEncoding,
    Tanh,
    TransformerEncoder,
    gelu,
    gelu_grad,
    masked_mean_pool,
    masked_mean_pool_backward,
    no_grad,
    softmax,
)
