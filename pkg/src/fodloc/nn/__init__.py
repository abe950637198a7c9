from .attention import MultiHeadSelfAttention, TransformerBlock
from .core import Module, Sequential
from .layers import (
    BatchNorm2d,
    Conv2d,
    GELU,
    GlobalAvgPool2d,
    LayerNorm,
    Linear,
    MaxPool2d,
    ReLU,
    Sigmoid,
    UpsampleNearest2x,
)
from .vit import ViTLayer

__all__ = [
    "Module",
    "Sequential",
    "Conv2d",
    "BatchNorm2d",
    "ReLU",
    "MaxPool2d",
    "UpsampleNearest2x",
    "Sigmoid",
    "Linear",
    "LayerNorm",
    "GELU",
    "GlobalAvgPool2d",
    "MultiHeadSelfAttention",
    "TransformerBlock",
    "ViTLayer",
]
