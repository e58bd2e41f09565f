"""Heterogeneous backbone roster.

Widths are chosen so that at the reference input (1x28x28, 10 classes) each
backbone's scalar parameter count lands within 2% of the published total.
Convolutions are 3x3 with padding 1; spatial reduction uses stride 2 since
pooling layers are not part of the graph vocabulary.
"""

from __future__ import annotations

from .model_graph import Activation, ArchitectureSpec, Conv2d, Dense, Flatten

REFERENCE_INPUT = (1, 28, 28)
REFERENCE_CLASSES = 10

# name -> (trainable layer count as published, published parameter total)
PUBLISHED = {
    "CNN_a": ("4+1", 0.63e6),
    "CNN_b": ("8+1", 3.15e6),
    "CNN_c": ("12+1", 9.70e6),
    "MLP_a": ("2", 0.054e6),
    "MLP_b": ("3", 0.14e6),
    "MLP_c": ("4", 0.30e6),
    "MLP_d": ("6", 0.80e6),
    "MLP_e": ("8", 2.10e6),
    "MLP_f": ("10", 4.40e6),
}

_MLP = {
    "MLP_a": (2, 68),
    "MLP_b": (3, 148),
    "MLP_c": (4, 236),
    "MLP_d": (6, 358),
    "MLP_e": (8, 529),
    "MLP_f": (10, 693),
}

_CNN = {
    "CNN_a": ([50, 100, 200, 200], [1, 2, 2, 2]),
    "CNN_b": ([52, 52, 104, 104, 208, 208, 416, 416], [1, 1, 2, 1, 2, 1, 2, 1]),
    "CNN_c": (
        [71, 71, 71, 142, 142, 142, 284, 284, 284, 568, 568, 568],
        [1, 1, 1, 2, 1, 1, 2, 1, 1, 2, 1, 1],
    ),
}

MANDATORY = ("MLP_a", "MLP_b", "MLP_c", "MLP_d", "MLP_e", "MLP_f", "CNN_a")
ROSTER = tuple(_MLP) + tuple(_CNN)


def mlp(name, n_layers, width, input_shape, num_classes):
    n_in = 1
    for d in input_shape:
        n_in *= d
    layers = [Flatten()]
    dims = [n_in] + [width] * (n_layers - 1) + [num_classes]
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        layers.append(Dense(a, b))
        if i < n_layers - 1:
            layers.append(Activation("relu"))
    return ArchitectureSpec(name, tuple(input_shape), tuple(layers), num_classes)


def cnn(name, channels, strides, input_shape, num_classes):
    if len(input_shape) != 3:
        raise ValueError(f"{name} needs (C, H, W) input, got {input_shape}")
    c, h, w = input_shape
    layers = []
    for out_c, s in zip(channels, strides):
        layers += [Conv2d(c, out_c, 3, 3, stride=s, padding=1), Activation("relu")]
        h = (h - 1) // s + 1
        w = (w - 1) // s + 1
        c = out_c
    layers += [Flatten(), Dense(c * h * w, num_classes)]
    return ArchitectureSpec(name, tuple(input_shape), tuple(layers), num_classes)


def get_architecture(name: str, input_shape=REFERENCE_INPUT, num_classes: int = REFERENCE_CLASSES) -> ArchitectureSpec:
    """Return the roster backbone ``name`` sized for ``input_shape``.

    MLPs accept any input shape (it is flattened); CNNs need ``(C, H, W)``.
    """
    input_shape = tuple(input_shape)
    if name in _MLP:
        n_layers, width = _MLP[name]
        return mlp(name, n_layers, width, input_shape, num_classes)
    if name in _CNN:
        if len(input_shape) == 1:
            raise ValueError(f"{name} needs image-shaped input")
        channels, strides = _CNN[name]
        return cnn(name, channels, strides, input_shape, num_classes)
    raise KeyError(f"unknown architecture {name!r}; known: {', '.join(ROSTER)}")
