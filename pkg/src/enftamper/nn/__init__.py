"""Small numpy autodiff library with the layers used by the tamper classifier."""

from .layers import (AttentionFuse, BiLSTM, Conv2D, Dense, Layer, LayerNorm, LSTM, LstmState,
                     attention_fuse, conv2d, dense, dropout, layer_norm, lstm_cell, maxpool2d,
                     pooled_size, softmax_head)
from .optim import adam_step, grad_check, relative_error, zero_grads
from .tensor import Parameter, Tensor, bce_from_probs, softmax
from .weights import load_weights, save_weights

__all__ = [
    "AttentionFuse", "BiLSTM", "Conv2D", "Dense", "Layer", "LayerNorm", "LSTM", "LstmState",
    "Parameter", "Tensor", "adam_step", "attention_fuse", "bce_from_probs", "conv2d", "dense",
    "dropout", "grad_check", "layer_norm", "load_weights", "lstm_cell", "maxpool2d",
    "pooled_size", "relative_error", "save_weights", "softmax", "softmax_head", "zero_grads",
]
