"""Parameter initialisation, regularisation, gradient-descent steps and gradient checking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn

ALGORITHMS = ("sgd", "sgd_momentum", "rprop")
REG_KINDS = ("none", "l1", "l2")


@dataclass(frozen=True)
class Regularization:
    kind: str = "none"
    lam: float = 0.0

    def __post_init__(self):
        if self.kind not in REG_KINDS:
            raise ValueError(f"unknown regularization {self.kind!r}")
        if self.lam < 0:
            raise ValueError("regularization strength must be >= 0")


@dataclass(frozen=True)
class OptimConfig:
    algorithm: str = "sgd"
    learning_rate: float = 0.01
    momentum: float = 0.0
    eta_plus: float = 1.2
    eta_minus: float = 0.5
    delta0: float = 0.01
    delta_min: float = 1e-6
    delta_max: float = 50.0
    reg: Regularization = Regularization()

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if not self.eta_plus > 1.0 > self.eta_minus > 0.0:
            raise ValueError("need eta_plus > 1 > eta_minus > 0")
        if not 0 < self.delta_min <= self.delta0 <= self.delta_max:
            raise ValueError("need 0 < delta_min <= delta0 <= delta_max")


@dataclass
class OptimState:
    velocity: np.ndarray | None = None
    step: np.ndarray | None = None
    prev_grad: np.ndarray | None = None
    t: int = field(default=0)


# ---------------------------------------------------------------------------


def init_gain(act: nn.Activation) -> float:
    return math.sqrt(2.0) if act.kind == "relu" else 1.0


def init_params(spec: nn.NetworkSpec, seed=0, gain=None, dtype=np.float64) -> np.ndarray:
    """Weights ~ U(-a/sqrt(fan_in), a/sqrt(fan_in)), biases 0.

    ``a`` defaults to sqrt(2) for ReLU layers and 1 otherwise; pass ``gain`` to
    override it for every layer.
    """
    rng = np.random.default_rng(seed)
    theta = np.zeros(spec.n_params, dtype=dtype)
    for start, stop, fan_in, act in spec.param_groups():
        if fan_in is None:
            continue
        a = (init_gain(act) if gain is None else gain) / math.sqrt(fan_in)
        theta[start:stop] = rng.uniform(-a, a, stop - start)
    return theta


def reg_penalty(reg: Regularization, params, weight_mask=None) -> float:
    """``lam * sum(theta**2)`` (l2) or ``lam * sum(|theta|)`` (l1) over the weights."""
    if reg.kind == "none" or reg.lam == 0.0:
        return 0.0
    w = np.asarray(params)
    if weight_mask is not None:
        w = w[weight_mask]
    if reg.kind == "l2":
        return float(reg.lam * np.dot(w, w))
    return float(reg.lam * np.abs(w).sum())


def reg_grad(reg: Regularization, params, weight_mask=None) -> np.ndarray:
    params = np.asarray(params)
    g = np.zeros_like(params)
    if reg.kind == "none" or reg.lam == 0.0:
        return g
    if reg.kind == "l2":
        g = 2.0 * reg.lam * params
    else:
        g = reg.lam * np.sign(params)
    if weight_mask is not None:
        g[~weight_mask] = 0.0
    return g


def sgd_step(params, grad, config: OptimConfig, state: OptimState | None = None):
    """``v <- mu*v - L*grad; theta <- theta + v``. Returns ``(params, state)``."""
    state = state or OptimState()
    if state.velocity is None:
        state.velocity = np.zeros_like(params)
    mu = config.momentum if config.algorithm == "sgd_momentum" else 0.0
    state.velocity = mu * state.velocity - config.learning_rate * grad
    state.t += 1
    return params + state.velocity, state


def rprop_step(params, grad, config: OptimConfig, state: OptimState | None = None):
    """One sign-based update with per-weight adaptive step sizes.

    A sign change shrinks the step and zeroes the remembered gradient so the
    next iteration neither grows nor shrinks. Intended for full-batch gradients.
    """
    state = state or OptimState()
    if state.step is None:
        state.step = np.full_like(params, config.delta0)
        state.prev_grad = np.zeros_like(params)
    s = np.sign(grad) * np.sign(state.prev_grad)
    step = state.step
    step = np.where(s > 0, np.minimum(step * config.eta_plus, config.delta_max), step)
    step = np.where(s < 0, np.maximum(step * config.eta_minus, config.delta_min), step)
    new_params = params - np.sign(grad) * step
    state.step = step
    state.prev_grad = np.where(s < 0, 0.0, grad)
    state.t += 1
    return new_params, state


def step(params, grad, config: OptimConfig, state: OptimState | None = None):
    if config.algorithm == "rprop":
        return rprop_step(params, grad, config, state)
    return sgd_step(params, grad, config, state)


# ---------------------------------------------------------------------------


def batch_loss_and_grad(spec: nn.NetworkSpec, params, x, y, loss_kind=None, mode="infer",
                        rng=None):
    """Mean batch loss and its gradient w.r.t. ``params``."""
    loss_kind = loss_kind or spec.loss
    if loss_kind != spec.loss:
        raise nn.NetworkError(f"spec is declared for {spec.loss!r}, not {loss_kind!r}")
    out, tape = nn.forward(spec, params, x, mode=mode, rng=rng)
    value = float(nn.loss(loss_kind, out, y))
    g = nn.loss_grad(loss_kind, out, y)
    return value, nn.backward(spec, params, tape, g)


def relative_error(analytic, numeric) -> np.ndarray:
    a = np.asarray(analytic)
    b = np.asarray(numeric)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)


def numerical_gradient(spec, params, batch, loss_kind=None, h=1e-5, indices=None, seed=0,
                       dtype=np.longdouble):
    """Central differences of the batch loss; dropout masks are frozen by ``seed``.

    The loss is evaluated in ``dtype``. Extended precision keeps the rounding
    error of the difference quotient (about eps/h) well below the size of small
    gradient components; pass ``np.float64`` for a plain double-precision check.
    """
    x, y = batch
    loss_kind = loss_kind or spec.loss
    mode = "train" if nn.has_dropout(spec) else "infer"
    theta = np.array(params, dtype=dtype)
    x = np.asarray(x, dtype=dtype)
    idx = np.arange(theta.size) if indices is None else np.asarray(indices)

    # without dropout the layers before the perturbed one are fixed, so their
    # output is computed once
    starts = np.array([a for a, _ in spec.offsets])
    inputs = [x]
    if mode == "infer":
        for layer, (a, b) in zip(spec.layers, spec.offsets):
            inputs.append(layer.forward(theta[a:b], inputs[-1], False, None)[0])

    def f(th, i):
        if mode == "infer":
            k = int(np.searchsorted(starts, i, side="right")) - 1
            out = inputs[k]
            for layer, (a, b) in zip(spec.layers[k:], spec.offsets[k:]):
                out = layer.forward(th[a:b], out, False, None)[0]
        else:
            out, _ = nn.forward(spec, th, x, mode=mode, rng=np.random.default_rng(seed))
        return nn.loss(loss_kind, out, y)

    num = np.empty(idx.size, dtype=dtype)
    for j, i in enumerate(idx):
        old = theta[i]
        theta[i] = old + h
        fp = f(theta, i)
        theta[i] = old - h
        fm = f(theta, i)
        theta[i] = old
        num[j] = (fp - fm) / (2.0 * h)
    return num


def gradient_check(spec, params, batch, loss_kind=None, h=1e-5, indices=None, analytic=None,
                   seed=0, dtype=np.longdouble) -> float:
    """Max relative error between backprop and central differences.

    ``analytic`` overrides the backprop gradient (used for fault injection);
    ``indices`` restricts the check to a subset of parameters.
    """
    params = np.asarray(params, dtype=np.float64)
    x, y = batch
    if analytic is None:
        mode = "train" if nn.has_dropout(spec) else "infer"
        _, analytic = batch_loss_and_grad(spec, params, x, y, loss_kind, mode,
                                          np.random.default_rng(seed))
    analytic = np.asarray(analytic)
    idx = np.arange(params.size) if indices is None else np.asarray(indices)
    num = numerical_gradient(spec, params, batch, loss_kind, h, idx, seed, dtype)
    return float(relative_error(analytic[idx], num).max())


def relu_margin(spec, params, x, rng_seed=0) -> float:
    """Smallest |pre-activation| over all ReLU units for the batch ``x``.

    Central differences are only meaningful when no ReLU input lies within the
    perturbation of zero; checks use this to reject degenerate instances.
    """
    mode = "train" if nn.has_dropout(spec) else "infer"
    _, tape = nn.forward(spec, params, x, mode=mode, rng=np.random.default_rng(rng_seed))
    margins = [np.inf]

    def visit(layers, caches):
        for layer, cache in zip(layers, caches):
            if isinstance(layer, nn.Parallel):
                for branch, (bc, _) in zip(layer.branches, cache[0]):
                    visit(branch, bc)
            elif getattr(layer, "activation", None) is not None \
                    and layer.activation.kind == "relu":
                z = cache[2] if isinstance(layer, nn._ConvND) else cache[1]
                margins.append(float(np.abs(z).min()))

    visit(spec.layers, tape.caches)
    return min(margins)


def check_instance(spec, seed, batch_size=2, margin=1e-3, max_tries=100):
    """A random ``(params, x, y)`` suitable for finite-difference checking.

    Biases get small random values so no unit sits at exactly zero, and inputs
    are redrawn until every ReLU input is at least ``margin`` away from zero.
    """
    rng = np.random.default_rng(seed)
    params = init_params(spec, seed=rng.integers(2**32))
    bias = ~spec.weight_mask
    params[bias] = rng.uniform(-0.1, 0.1, int(bias.sum()))
    n_out = spec.output_shape[0]
    for _ in range(max_tries):
        x = rng.normal(size=(batch_size,) + spec.input_shape)
        if spec.loss == "cross_entropy_softmax":
            y = rng.integers(0, n_out, batch_size)
        else:
            y = rng.normal(size=(batch_size,) + spec.output_shape)
        if relu_margin(spec, params, x) >= margin:
            return params, x, y
    raise RuntimeError(f"no kink-free instance found in {max_tries} draws")
