"""Hamming-windowed convolutions in plain numpy: layers, spectra, orthogonality, attacks and an experiment CLI."""

from .conv import ConvGeometry, ConvLayer, conv2d_backward, conv2d_forward
from .nn import Model, ModelSpec, TrainConfig, adam, model_init, sgd, train
from .tensor import Rng, load_tensor, save_tensor
from .windows import Window, WindowSpec, hamming_1d, make_window

__version__ = "0.1.0"

__all__ = [
    "ConvGeometry", "ConvLayer", "conv2d_backward", "conv2d_forward",
    "Model", "ModelSpec", "TrainConfig", "adam", "model_init", "sgd", "train",
    "Rng", "load_tensor", "save_tensor",
    "Window", "WindowSpec", "hamming_1d", "make_window",
]
