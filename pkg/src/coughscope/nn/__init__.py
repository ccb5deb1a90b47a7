from .layers import BatchNorm2d, Conv2d, ConvBlock, Linear, Module
from .optim import OptimizerState, lr_at, sgd_step
from .serialize import WeightFormatError, load_weights, save_weights
from .tensor import GraphError, ShapeError, Tensor, backward, no_grad

__all__ = [
    "BatchNorm2d", "Conv2d", "ConvBlock", "GraphError", "Linear", "Module", "OptimizerState",
    "ShapeError", "Tensor", "WeightFormatError", "backward", "load_weights", "lr_at",
    "no_grad", "save_weights", "sgd_step",
]
