"""The three patch-classification architectures."""

from __future__ import annotations

from . import nn
from .sampler import PatchFormat

CONV_MAPS = (20, 50)
KERNEL = 5
DENSE_UNITS = (1000,)
N_CLASSES = 3


def build_architecture(fmt: PatchFormat, conv_maps=CONV_MAPS, kernel: int = KERNEL,
                       dense_units=DENSE_UNITS, activation="relu", n_classes: int = N_CLASSES,
                       dropout: float = 0.0, loss: str = "cross_entropy_softmax") -> nn.NetworkSpec:
    """Two valid convolutions, hidden dense layer(s), then a softmax output.

    Stacked-2D feeds its slices to a 2D tower as channels, tri-planar runs one
    2D tower per plane with no connections until the concatenation, and 3D uses
    3D kernels. No max-pooling anywhere. ``dense_units`` lists hidden widths;
    extra entries add further dense layers.
    """
    c1, c2 = conv_maps
    min_size = 2 * (kernel - 1) + 1
    if fmt.size < min_size:
        raise ValueError(f"patch size {fmt.size} too small for two {kernel}-wide convolutions "
                         f"(need >= {min_size})")
    out = fmt.size - 2 * (kernel - 1)
    act = nn.as_activation(activation)
    if fmt.kind == "stacked2d":
        layers = [nn.Conv2D(fmt.layers, c1, kernel, kernel, act),
                  nn.Conv2D(c1, c2, kernel, kernel, act), nn.Flatten()]
        width = c2 * out * out
    elif fmt.kind == "triplanar":
        tower = (nn.Conv2D(1, c1, kernel, kernel, act), nn.Conv2D(c1, c2, kernel, kernel, act))
        layers = [nn.Parallel((tower, tower, tower), (1, 1, 1))]
        width = 3 * c2 * out * out
    else:
        layers = [nn.Conv3D(1, c1, kernel, kernel, kernel, act),
                  nn.Conv3D(c1, c2, kernel, kernel, kernel, act), nn.Flatten()]
        width = c2 * out ** 3
    for units in dense_units:
        layers.append(nn.Dense(width, units, act))
        if dropout > 0:
            layers.append(nn.Dropout(dropout))
        width = units
    final_act = "softmax" if loss == "cross_entropy_softmax" else "linear"
    layers.append(nn.Dense(width, n_classes, final_act))
    return nn.NetworkSpec(tuple(layers), fmt.input_shape, loss)


def flatten_width(spec: nn.NetworkSpec) -> int:
    """Width of the vector entering the first dense layer."""
    for layer, shape in zip(spec.layers, spec.shapes):
        if isinstance(layer, (nn.Flatten, nn.Parallel)):
            return shape[0]
    raise ValueError("network has no flatten or parallel stage")


def format_from_spec(spec: nn.NetworkSpec) -> PatchFormat:
    """Recover the patch format a preset network was built for."""
    first = spec.layers[0]
    shape = spec.input_shape
    if isinstance(first, nn.Parallel):
        return PatchFormat("triplanar", shape[1])
    if isinstance(first, nn.Conv3D):
        return PatchFormat("3d", shape[1])
    return PatchFormat("stacked2d", shape[1], shape[0])


CHECK_CONV_MAPS = (3, 4)
CHECK_DENSE_UNITS = (8,)


def check_architecture(fmt: PatchFormat, activation="relu") -> nn.NetworkSpec:
    """The preset topology at reduced width, small enough for exhaustive finite differences."""
    return build_architecture(fmt, CHECK_CONV_MAPS, KERNEL, CHECK_DENSE_UNITS, activation)
