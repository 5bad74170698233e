from .functional import (
    batchnorm,
    conv2d,
    deconv2d,
    linear,
    lstm_forward,
    lstm_step,
    maxpool2d,
    pixelwise_cross_entropy,
    relu,
    softmax,
    softmax_cross_entropy,
)
from .init import init_kaiming, init_orthogonal, init_xavier_normal, init_zeros
from .optim import AdamState, adam_step

__all__ = [
    "AdamState",
    "adam_step",
    "batchnorm",
    "conv2d",
    "deconv2d",
    "init_kaiming",
    "init_orthogonal",
    "init_xavier_normal",
    "init_zeros",
    "linear",
    "lstm_forward",
    "lstm_step",
    "maxpool2d",
    "pixelwise_cross_entropy",
    "relu",
    "softmax",
    "softmax_cross_entropy",
]
