"""Minimal reverse-mode engine: layers, losses, optimizer and gradient checks."""

from src.nn.layers import (
    AvgPoolGlobal,
    AvgPoolGrid,
    BatchNorm,
    Conv2D,
    FullyConnected,
    Layer,
    MaxPool2D,
    ReLU,
    Sequential,
)
from src.nn.losses import LossValue, SoftmaxCrossEntropy, softmax, softmax_cross_entropy
from src.nn.optim import SGD

__all__ = [
    "AvgPoolGlobal",
    "AvgPoolGrid",
    "BatchNorm",
    "Conv2D",
    "FullyConnected",
    "Layer",
    "LossValue",
    "MaxPool2D",
    "ReLU",
    "SGD",
    "Sequential",
    "SoftmaxCrossEntropy",
    "softmax",
    "softmax_cross_entropy",
]
