from .io import load_params, save_params
from .layers import (LayerSpec, conv1d, conv_transpose1d, dense, flatten, leaky_relu, relu, reshape, sigmoid,
                     softmax)
from .network import Network, build_network
from .optim import SGD, Adam, optimizer_step
from .params import GradientUpdate, ParameterSet, check_aligned

__all__ = [
    "LayerSpec", "Network", "ParameterSet", "GradientUpdate", "SGD", "Adam", "build_network", "optimizer_step",
    "save_params", "load_params", "check_aligned", "dense", "conv1d", "conv_transpose1d", "relu", "leaky_relu",
    "sigmoid", "softmax", "flatten", "reshape",
]
