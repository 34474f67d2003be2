"""Layer stacks over a flat parameter vector, with reverse-mode backpropagation.

A network is a :class:`NetworkSpec` (an ordered tuple of layer descriptions plus
the input shape and loss) and a flat parameter vector ``theta`` holding every
weight and bias. Each layer owns a contiguous slice of ``theta``: its weights
first, then its biases. :func:`forward` evaluates the stack and records a
:class:`Tape`; :func:`backward` replays the tape in reverse to produce the
gradient with respect to ``theta``.

All layer computations are batched over a leading sample axis.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import tensor as T

ACTIVATION_KINDS = ("linear", "logistic", "tanh", "relu", "softmax")
LOSS_KINDS = ("mse", "cross_entropy_softmax")
MODEL_MAGIC = b"VSEGNET1"
MODEL_FORMAT_VERSION = 1


class NetworkError(ValueError):
    """Raised for malformed specs, shape mismatches and stale tapes."""


# --------------------------------------------------------------------------
# activations
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Activation:
    kind: str = "linear"
    k: float = 1.0  # logistic steepness
    x0: float = 0.0  # logistic midpoint

    def __post_init__(self):
        if self.kind not in ACTIVATION_KINDS:
            raise NetworkError(f"unknown activation {self.kind!r}")
        if self.kind == "logistic" and not self.k > 0:
            raise NetworkError("logistic steepness k must be > 0")

    def to_dict(self) -> dict:
        if self.kind == "logistic":
            return {"kind": self.kind, "k": self.k, "x0": self.x0}
        return {"kind": self.kind}


def as_activation(act) -> Activation:
    if isinstance(act, Activation):
        return act
    if isinstance(act, dict):
        return Activation(**act)
    return Activation(str(act))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def activate(kind, x: np.ndarray) -> np.ndarray:
    """Apply an activation; softmax normalises over the last axis."""
    act = as_activation(kind)
    if act.kind == "linear":
        return x
    if act.kind == "relu":
        return np.maximum(x, 0.0)
    if act.kind == "tanh":
        return np.tanh(x)
    if act.kind == "logistic":
        return 1.0 / (1.0 + np.exp(-act.k * (x - act.x0)))
    return _softmax(x)


def activate_grad(kind, x: np.ndarray) -> np.ndarray:
    """Elementwise derivative at ``x``.

    ReLU has derivative 0 at exactly 0. For softmax only the diagonal of the
    Jacobian, ``p * (1 - p)``, is returned; layers use the full vector-Jacobian
    product instead.
    """
    act = as_activation(kind)
    if act.kind == "linear":
        return np.ones_like(x)
    if act.kind == "relu":
        return (x > 0).astype(x.dtype)
    if act.kind == "tanh":
        return 1.0 - np.tanh(x) ** 2
    if act.kind == "logistic":
        y = activate(act, x)
        return act.k * y * (1.0 - y)
    p = _softmax(x)
    return p * (1.0 - p)


def _activation_vjp(act: Activation, z, y, g):
    if act.kind == "linear":
        return g
    if act.kind == "relu":
        return g * (z > 0)
    if act.kind == "tanh":
        return g * (1.0 - y * y)
    if act.kind == "logistic":
        return g * (act.k * y * (1.0 - y))
    return y * (g - (g * y).sum(axis=-1, keepdims=True))


def node_output(weights, inputs, bias: float, kind="linear") -> float:
    """Output of a single node: ``f(sum_i w_i x_i + b)``."""
    w = np.asarray(weights, dtype=float).ravel()
    x = np.asarray(inputs, dtype=float).ravel()
    if w.shape != x.shape:
        raise NetworkError(f"{w.size} weights for {x.size} inputs")
    act = as_activation(kind)
    if act.kind == "softmax":
        raise NetworkError("softmax is not defined for a single node")
    return float(activate(act, np.asarray(float(np.dot(w, x)) + bias)))


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------


class Layer:
    """Base class for layer descriptions. Subclasses are frozen dataclasses."""

    kind = "layer"

    @property
    def n_params(self) -> int:
        return 0

    def output_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def param_groups(self):
        """Yield ``(count, fan_in, activation)``; fan_in is None for biases."""
        return iter(())

    def forward(self, p, x, train, rng):
        raise NotImplementedError

    def backward(self, p, cache, g, gp, need_input_grad, pre_activation=False):
        raise NotImplementedError

    def to_dict(self) -> dict:
        raise NotImplementedError


@dataclass(frozen=True)
class Dense(Layer):
    in_features: int
    out_features: int
    activation: Activation = Activation("linear")

    kind = "dense"

    def __post_init__(self):
        object.__setattr__(self, "activation", as_activation(self.activation))

    @property
    def n_params(self):
        return self.out_features * self.in_features + self.out_features

    def output_shape(self, in_shape):
        if in_shape != (self.in_features,):
            raise NetworkError(f"Dense expects input ({self.in_features},), got {in_shape}")
        return (self.out_features,)

    def param_groups(self):
        yield self.out_features * self.in_features, self.in_features, self.activation
        yield self.out_features, None, self.activation

    def _split(self, p):
        nw = self.out_features * self.in_features
        return p[:nw].reshape(self.out_features, self.in_features), p[nw:]

    def forward(self, p, x, train, rng):
        w, b = self._split(p)
        z = x @ w.T + b
        y = activate(self.activation, z)
        return y, (x, z, y)

    def backward(self, p, cache, g, gp, need_input_grad, pre_activation=False):
        x, z, y = cache
        w, _ = self._split(p)
        gz = g if pre_activation else _activation_vjp(self.activation, z, y, g)
        nw = w.size
        gp[:nw] = (gz.T @ x).ravel()
        gp[nw:] = gz.sum(axis=0)
        return gz @ w if need_input_grad else None

    def to_dict(self):
        return {
            "kind": self.kind,
            "in": self.in_features,
            "out": self.out_features,
            "act": self.activation.to_dict(),
        }


@dataclass(frozen=True)
class _ConvND(Layer):
    in_channels: int
    out_maps: int
    ksize: tuple
    activation: Activation = Activation("linear")

    def __post_init__(self):
        object.__setattr__(self, "activation", as_activation(self.activation))
        object.__setattr__(self, "ksize", tuple(int(k) for k in self.ksize))
        if len(self.ksize) != self.nsp:
            raise NetworkError(f"{type(self).__name__} needs {self.nsp} kernel extents")

    @property
    def n_params(self):
        return self.out_maps * self.in_channels * int(np.prod(self.ksize)) + self.out_maps

    def output_shape(self, in_shape):
        if len(in_shape) != self.nsp + 1 or in_shape[0] != self.in_channels:
            raise NetworkError(
                f"{type(self).__name__} expects ({self.in_channels}, <{self.nsp} spatial>), "
                f"got {in_shape}"
            )
        sp = in_shape[1:]
        if any(k > s for k, s in zip(self.ksize, sp)):
            raise NetworkError(f"kernel {self.ksize} larger than input {sp}")
        return (self.out_maps,) + tuple(s - k + 1 for s, k in zip(sp, self.ksize))

    def param_groups(self):
        fan_in = self.in_channels * int(np.prod(self.ksize))
        yield self.out_maps * fan_in, fan_in, self.activation
        yield self.out_maps, None, self.activation

    def _split(self, p):
        nw = self.n_params - self.out_maps
        return p[:nw].reshape((self.out_maps, self.in_channels) + self.ksize), p[nw:]

    def forward(self, p, x, train, rng):
        w, b = self._split(p)
        z, cols = T._conv_valid(x, w, b, self.nsp, return_cols=True)
        y = activate(self.activation, z)
        return y, (x.shape, cols, z, y)

    def backward(self, p, cache, g, gp, need_input_grad, pre_activation=False):
        x_shape, cols, z, y = cache
        w, _ = self._split(p)
        gz = g if pre_activation else _activation_vjp(self.activation, z, y, g)
        gk, gb, gx = T._conv_valid_backward(None, w, gz, self.nsp, need_input_grad, cols,
                                            x_shape)
        nw = w.size
        gp[:nw] = gk.ravel()
        gp[nw:] = gb
        return gx


@dataclass(frozen=True, init=False)
class Conv2D(_ConvND):
    kind = "conv2d"
    nsp = 2

    def __init__(self, in_channels, out_maps, kh, kw, activation="linear"):
        object.__setattr__(self, "in_channels", int(in_channels))
        object.__setattr__(self, "out_maps", int(out_maps))
        object.__setattr__(self, "ksize", (kh, kw))
        object.__setattr__(self, "activation", activation)
        self.__post_init__()

    def to_dict(self):
        kh, kw = self.ksize
        return {"kind": self.kind, "in_ch": self.in_channels, "out_maps": self.out_maps,
                "kh": kh, "kw": kw, "act": self.activation.to_dict()}


@dataclass(frozen=True, init=False)
class Conv3D(_ConvND):
    kind = "conv3d"
    nsp = 3

    def __init__(self, in_channels, out_maps, kd, kh, kw, activation="linear"):
        object.__setattr__(self, "in_channels", int(in_channels))
        object.__setattr__(self, "out_maps", int(out_maps))
        object.__setattr__(self, "ksize", (kd, kh, kw))
        object.__setattr__(self, "activation", activation)
        self.__post_init__()

    def to_dict(self):
        kd, kh, kw = self.ksize
        return {"kind": self.kind, "in_ch": self.in_channels, "out_maps": self.out_maps,
                "kd": kd, "kh": kh, "kw": kw, "act": self.activation.to_dict()}


@dataclass(frozen=True)
class MaxPool2D(Layer):
    ph: int
    pw: int

    kind = "maxpool2d"

    def output_shape(self, in_shape):
        if len(in_shape) != 3:
            raise NetworkError(f"MaxPool2D expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        if h % self.ph or w % self.pw:
            raise NetworkError(f"pool {self.ph}x{self.pw} does not divide {h}x{w}")
        return (c, h // self.ph, w // self.pw)

    def forward(self, p, x, train, rng):
        y, idx = T.maxpool2d(x, self.ph, self.pw)
        return y, (x.shape, idx)

    def backward(self, p, cache, g, gp, need_input_grad, pre_activation=False):
        shape, idx = cache
        return T.maxpool2d_backward(g, idx, shape) if need_input_grad else None

    def to_dict(self):
        return {"kind": self.kind, "ph": self.ph, "pw": self.pw}


@dataclass(frozen=True)
class Dropout(Layer):
    """Per-node dropout on the outputs of the preceding dense layer.

    Training multiplies by a 0/1 mask without rescaling; at inference the layer
    is the identity and the following layer's weights are scaled instead, see
    :func:`scale_weights_for_inference`.
    """

    rate: float = 0.5

    kind = "dropout"

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise NetworkError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def forward(self, p, x, train, rng):
        if not train:
            return x, None
        if rng is None:
            raise NetworkError("training-mode dropout needs an rng")
        mask = dropout_mask(self.rate, x.shape, rng, dtype=x.dtype)
        return x * mask, mask

    def backward(self, p, cache, g, gp, need_input_grad, pre_activation=False):
        return g if cache is None else g * cache

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate}


@dataclass(frozen=True)
class Flatten(Layer):
    kind = "flatten"

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, p, x, train, rng):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, p, cache, g, gp, need_input_grad, pre_activation=False):
        return g.reshape(cache)

    def to_dict(self):
        return {"kind": self.kind}


@dataclass(frozen=True)
class Parallel(Layer):
    """Independent towers over disjoint channel groups, flattened and concatenated.

    ``split`` gives the number of input channels routed to each branch, in order.
    """

    branches: tuple
    split: tuple

    kind = "parallel"

    def __post_init__(self):
        object.__setattr__(self, "branches", tuple(tuple(b) for b in self.branches))
        object.__setattr__(self, "split", tuple(int(s) for s in self.split))
        if len(self.branches) != len(self.split) or not self.branches:
            raise NetworkError("Parallel needs one channel count per branch")
        if any(s < 1 for s in self.split):
            raise NetworkError("Parallel channel counts must be >= 1")

    @property
    def n_params(self):
        return sum(layer.n_params for b in self.branches for layer in b)

    def _branch_shapes(self, in_shape):
        if in_shape[0] != sum(self.split):
            raise NetworkError(
                f"Parallel expects {sum(self.split)} input channels, got {in_shape[0]}"
            )
        shapes = []
        for bi, (branch, nch) in enumerate(zip(self.branches, self.split)):
            shape = (nch,) + tuple(in_shape[1:])
            for li, layer in enumerate(branch):
                try:
                    shape = layer.output_shape(shape)
                except NetworkError as exc:
                    raise NetworkError(f"branch {bi} layer {li}: {exc}") from None
            shapes.append(shape)
        return shapes

    def output_shape(self, in_shape):
        return (sum(int(np.prod(s)) for s in self._branch_shapes(in_shape)),)

    def param_groups(self):
        for branch in self.branches:
            for layer in branch:
                yield from layer.param_groups()

    def _slices(self):
        off = 0
        out = []
        for branch in self.branches:
            spans = []
            for layer in branch:
                spans.append((off, off + layer.n_params))
                off += layer.n_params
            out.append(spans)
        return out

    def forward(self, p, x, train, rng):
        outs, caches = [], []
        c0 = 0
        for branch, nch, spans in zip(self.branches, self.split, self._slices()):
            h = x[:, c0:c0 + nch]
            c0 += nch
            bc = []
            for layer, (a, b) in zip(branch, spans):
                h, cache = layer.forward(p[a:b], h, train, rng)
                bc.append(cache)
            caches.append((bc, h.shape))
            outs.append(h.reshape(h.shape[0], -1))
        widths = [o.shape[1] for o in outs]
        return np.concatenate(outs, axis=1), (caches, widths, x.shape)

    def backward(self, p, cache, g, gp, need_input_grad, pre_activation=False):
        caches, widths, in_shape = cache
        gx = np.zeros(in_shape, dtype=g.dtype) if need_input_grad else None
        col = 0
        c0 = 0
        for branch, nch, spans, (bc, out_shape), wdt in zip(
            self.branches, self.split, self._slices(), caches, widths
        ):
            h = g[:, col:col + wdt].reshape(out_shape)
            col += wdt
            for i in range(len(branch) - 1, -1, -1):
                a, b = spans[i]
                need = need_input_grad or i > 0
                h = branch[i].backward(p[a:b], bc[i], h, gp[a:b], need)
            if need_input_grad:
                gx[:, c0:c0 + nch] = h
            c0 += nch
        return gx

    def to_dict(self):
        return {
            "kind": self.kind,
            "split": list(self.split),
            "branches": [[layer.to_dict() for layer in b] for b in self.branches],
        }


def layer_from_dict(d: dict) -> Layer:
    kind = d["kind"]
    if kind == "dense":
        return Dense(d["in"], d["out"], as_activation(d["act"]))
    if kind == "conv2d":
        return Conv2D(d["in_ch"], d["out_maps"], d["kh"], d["kw"], as_activation(d["act"]))
    if kind == "conv3d":
        return Conv3D(d["in_ch"], d["out_maps"], d["kd"], d["kh"], d["kw"],
                      as_activation(d["act"]))
    if kind == "maxpool2d":
        return MaxPool2D(d["ph"], d["pw"])
    if kind == "dropout":
        return Dropout(d["rate"])
    if kind == "flatten":
        return Flatten()
    if kind == "parallel":
        return Parallel(tuple(tuple(layer_from_dict(x) for x in b) for b in d["branches"]),
                        tuple(d["split"]))
    raise NetworkError(f"unknown layer kind {kind!r}")


# --------------------------------------------------------------------------
# network spec
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NetworkSpec:
    layers: tuple
    input_shape: tuple
    loss: str = "cross_entropy_softmax"

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.loss not in LOSS_KINDS:
            raise NetworkError(f"unknown loss {self.loss!r}")
        if not self.layers:
            raise NetworkError("network needs at least one layer")
        self.shapes  # validates composition
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Dropout):
                if i == 0 or not isinstance(self.layers[i - 1], Dense):
                    raise NetworkError(f"layer {i}: Dropout must follow a Dense layer")
                nxt = next((l for l in self.layers[i + 1:] if l.n_params), None)
                if not isinstance(nxt, Dense):
                    raise NetworkError(f"layer {i}: Dropout must feed a Dense layer")
        if self.loss == "cross_entropy_softmax":
            last = self.layers[-1]
            if not (isinstance(last, Dense) and last.activation.kind == "softmax"):
                raise NetworkError("cross_entropy_softmax needs a final Dense softmax layer")

    @cached_property
    def shapes(self) -> tuple:
        """Per-layer output shapes (excluding the batch axis)."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except NetworkError as exc:
                raise NetworkError(f"layer {i} ({type(layer).__name__}): {exc}") from None
            out.append(shape)
        return tuple(out)

    @property
    def output_shape(self) -> tuple:
        return self.shapes[-1]

    @cached_property
    def offsets(self) -> tuple:
        """``(start, stop)`` of each layer's slice of the parameter vector."""
        off = 0
        spans = []
        for layer in self.layers:
            spans.append((off, off + layer.n_params))
            off += layer.n_params
        return tuple(spans)

    @property
    def n_params(self) -> int:
        return self.offsets[-1][1]

    def param_groups(self):
        """Yield ``(start, stop, fan_in, activation)`` over the whole vector."""
        off = 0
        for layer in self.layers:
            for count, fan_in, act in layer.param_groups():
                yield off, off + count, fan_in, act
                off += count

    @cached_property
    def weight_mask(self) -> np.ndarray:
        """Boolean mask over ``theta``: True for weights, False for biases."""
        mask = np.zeros(self.n_params, dtype=bool)
        for a, b, fan_in, _ in self.param_groups():
            mask[a:b] = fan_in is not None
        return mask

    def to_dict(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "loss": self.loss,
            "layers": [layer.to_dict() for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(layer_from_dict(x) for x in d["layers"]), tuple(d["input_shape"]),
                   d.get("loss", "cross_entropy_softmax"))


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


@dataclass
class Tape:
    """Everything :func:`backward` needs from one :func:`forward` call."""

    spec: NetworkSpec
    n_params: int
    caches: list
    output_shape: tuple
    single: bool
    mode: str
    used: bool = field(default=False)


def _check_params(spec, params):
    params = np.asarray(params)
    if params.ndim != 1 or params.size != spec.n_params:
        raise NetworkError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    return params


def forward(spec: NetworkSpec, params, x, mode: str = "infer", rng=None):
    """Evaluate the network.

    ``x`` may be a single sample shaped ``spec.input_shape`` or a batch with a
    leading sample axis. Returns ``(output, tape)``.
    """
    if mode not in ("train", "infer"):
        raise NetworkError(f"mode must be 'train' or 'infer', got {mode!r}")
    params = _check_params(spec, params)
    x = np.asarray(x, dtype=params.dtype)
    single = x.shape == spec.input_shape
    if single:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise NetworkError(f"layer 0: input shape {x.shape[1:]} != {spec.input_shape}")
    train = mode == "train"
    caches = []
    h = x
    for i, (layer, (a, b)) in enumerate(zip(spec.layers, spec.offsets)):
        try:
            h, cache = layer.forward(params[a:b], h, train, rng)
        except (T.ShapeError, NetworkError) as exc:
            raise NetworkError(f"layer {i} ({type(layer).__name__}): {exc}") from None
        caches.append(cache)
    tape = Tape(spec, spec.n_params, caches, h.shape, single, mode)
    return (h[0] if single else h), tape


def backward(spec: NetworkSpec, params, tape: Tape, loss_grad) -> np.ndarray:
    """Gradient of the loss w.r.t. every parameter.

    ``loss_grad`` is the gradient w.r.t. the network output, except for
    ``cross_entropy_softmax`` networks, where it is the fused gradient w.r.t. the
    final layer's pre-softmax input as returned by :func:`loss_grad`.
    """
    params = _check_params(spec, params)
    if tape.spec != spec or tape.n_params != params.size:
        raise NetworkError("tape was recorded for a different network")
    g = np.asarray(loss_grad, dtype=params.dtype)
    if tape.single:
        g = g[None]
    if g.shape != tape.output_shape:
        raise NetworkError(f"loss gradient shape {g.shape} != output shape {tape.output_shape}")
    grad = np.zeros_like(params)
    fused = spec.loss == "cross_entropy_softmax"
    last = len(spec.layers) - 1
    for i in range(last, -1, -1):
        a, b = spec.offsets[i]
        g = spec.layers[i].backward(
            params[a:b], tape.caches[i], g, grad[a:b], i > 0, pre_activation=fused and i == last
        )
    tape.used = True
    return grad


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def _as_batch(output, target, kind):
    out = np.asarray(output)
    out = out.astype(np.result_type(out.dtype, np.float64), copy=False)
    single = out.ndim == 1
    if single:
        out = out[None]
    if kind == "cross_entropy_softmax":
        t = np.atleast_1d(np.asarray(target))
        if t.shape != (out.shape[0],):
            raise NetworkError(f"expected {out.shape[0]} class indices, got shape {t.shape}")
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise NetworkError("class indices must be integers")
            t = t.astype(int)
        if t.min() < 0 or t.max() >= out.shape[1]:
            raise NetworkError(f"class index out of range [0, {out.shape[1]})")
    else:
        t = np.asarray(target, dtype=out.dtype)
        if single:
            t = t[None]
        if t.shape != out.shape:
            raise NetworkError(f"target shape {t.shape} != output shape {out.shape}")
    return out, t, single


def loss(kind: str, output, target):
    """Mean per-sample loss: ``0.5*sum(residual**2)`` or ``-log p[target]``.

    Returned as a numpy scalar in the output's precision (at least float64).
    """
    out, t, _ = _as_batch(output, target, kind)
    if kind == "mse":
        return 0.5 * ((out - t) ** 2).sum() / out.shape[0]
    if kind == "cross_entropy_softmax":
        p = out[np.arange(out.shape[0]), t]
        return -np.log(np.maximum(p, np.finfo(out.dtype).tiny)).mean()
    raise NetworkError(f"unknown loss {kind!r}")


def loss_grad(kind: str, output, target) -> np.ndarray:
    """Gradient of :func:`loss`; for cross-entropy this is ``(p - onehot) / N``."""
    out, t, single = _as_batch(output, target, kind)
    n = out.shape[0]
    if kind == "mse":
        g = (out - t) / n
    elif kind == "cross_entropy_softmax":
        g = out.copy()
        g[np.arange(n), t] -= 1.0
        g /= n
    else:
        raise NetworkError(f"unknown loss {kind!r}")
    return g[0] if single else g


# --------------------------------------------------------------------------
# dropout
# --------------------------------------------------------------------------


def dropout_mask(rate: float, shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """0/1 mask whose entries are 0 with probability ``rate``."""
    if not 0.0 <= rate < 1.0:
        raise NetworkError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=dtype)
    return (rng.random(shape) >= rate).astype(dtype)


def scale_weights_for_inference(params, spec: NetworkSpec) -> np.ndarray:
    """Multiply the weights fed by each dropout layer by its keep probability."""
    out = np.array(params, copy=True)
    for i, layer in enumerate(spec.layers):
        if not isinstance(layer, Dropout) or layer.rate == 0.0:
            continue
        j = next(k for k in range(i + 1, len(spec.layers)) if spec.layers[k].n_params)
        a, _ = spec.offsets[j]
        nxt = spec.layers[j]
        nw = nxt.out_features * nxt.in_features
        out[a:a + nw] *= 1.0 - layer.rate
    return out


def has_dropout(spec: NetworkSpec) -> bool:
    return any(isinstance(layer, Dropout) and layer.rate > 0 for layer in spec.layers)


# --------------------------------------------------------------------------
# model files
# --------------------------------------------------------------------------


def save_model(path, spec: NetworkSpec, params, extra: dict | None = None) -> None:
    """Write ``VSEGNET1`` + u32 manifest length + JSON manifest + little-endian f64 params."""
    params = _check_params(spec, params)
    manifest = {"format_version": MODEL_FORMAT_VERSION, "n_params": spec.n_params,
                "network": spec.to_dict()}
    if extra:
        manifest["extra"] = extra
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(np.asarray(params, dtype="<f8").tobytes())


def load_model(path) -> tuple[NetworkSpec, np.ndarray, dict]:
    data = Path(path).read_bytes()
    if data[:8] != MODEL_MAGIC:
        raise NetworkError(f"{path}: not a VSEGNET1 model file")
    (mlen,) = struct.unpack_from("<I", data, 8)
    manifest = json.loads(data[12:12 + mlen].decode("utf-8"))
    if manifest.get("format_version") != MODEL_FORMAT_VERSION:
        raise NetworkError(f"{path}: unsupported format version {manifest.get('format_version')}")
    spec = NetworkSpec.from_dict(manifest["network"])
    params = np.frombuffer(data[12 + mlen:], dtype="<f8").astype(np.float64)
    if params.size != spec.n_params:
        raise NetworkError(f"{path}: expected {spec.n_params} parameters, found {params.size}")
    return spec, params, manifest.get("extra", {})


def spec_summary(spec: NetworkSpec) -> list[str]:
    lines = [f"input {spec.input_shape}"]
    for i, (layer, shape) in enumerate(zip(spec.layers, spec.shapes)):
        lines.append(f"{i:2d} {type(layer).__name__:<9} -> {shape} ({layer.n_params} params)")
    return lines


__all__: Sequence[str] = [
    "Activation", "Dense", "Conv2D", "Conv3D", "MaxPool2D", "Dropout", "Flatten", "Parallel",
    "NetworkSpec", "Tape", "NetworkError", "activate", "activate_grad", "node_output", "forward",
    "backward", "loss", "loss_grad", "dropout_mask", "scale_weights_for_inference",
    "save_model", "load_model",
]
