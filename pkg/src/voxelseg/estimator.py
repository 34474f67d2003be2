"""scikit-learn compatible patch classifier wrapping the network engine."""

from __future__ import annotations

import logging
import math
import time

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn, optim
from .presets import build_architecture
from .sampler import PatchFormat
from .stopping import EarlyStopping
from .validation import check_patches, check_targets

log = logging.getLogger(__name__)

_OPTIMIZERS = {"sgd": "sgd", "momentum": "sgd_momentum", "sgd_momentum": "sgd_momentum",
               "rprop": "rprop"}


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


def network_proba(spec: nn.NetworkSpec, params, X, chunk: int = 1000) -> np.ndarray:
    """Class probabilities for a patch array, evaluated in chunks in the params' dtype."""
    p = np.asarray(params)
    if nn.has_dropout(spec):
        p = nn.scale_weights_for_inference(p, spec)
    out = [nn.forward(spec, p, np.asarray(X[a:a + chunk], dtype=p.dtype))[0]
           for a in range(0, len(X), chunk)]
    if not out:
        return np.zeros((0,) + spec.output_shape, dtype=p.dtype)
    return np.concatenate(out, axis=0)


def cross_entropy(spec: nn.NetworkSpec, params, X, y) -> float:
    """Mean cross-entropy of the network on ``(X, y)``."""
    return float(nn.loss("cross_entropy_softmax", network_proba(spec, params, X), y))


class PatchCNNClassifier(ClassifierMixin, BaseEstimator):
    """Convolutional voxel classifier trained on extracted patches.

    ``X`` holds network inputs shaped ``(n_samples, *input_shape)`` as produced
    by :func:`voxelseg.sampler.stack_samples`: ``(n, layers, s, s)`` for
    stacked-2D, ``(n, 3, s, s)`` for tri-planar and ``(n, 1, s, s, s)`` for 3D.

    Training is minibatch gradient descent. After every full pass over the
    training set the validation loss is computed and fed to
    :class:`~voxelseg.stopping.EarlyStopping`; the parameters with the best
    validation loss are kept. Without an explicit validation set a
    ``validation_fraction`` of the training data is held out.

    Parameters
    ----------
    patch_format : {'stacked2d', 'triplanar', '3d'}
    patch_size : int
    stack : int
        Slice count for stacked-2D patches.
    conv_maps, kernel_size, dense_units, activation, dropout
        Architecture knobs, see :func:`voxelseg.presets.build_architecture`.
    optimizer : {'sgd', 'momentum', 'rprop'}
        ``rprop`` always uses full-batch gradients.
    learning_rate, momentum, batch_size
    reg : {'none', 'l1', 'l2'}
    reg_lambda : float
    improvement_threshold : float
        Relative validation improvement needed to extend training.
    max_iter : int or None
        Hard cap on optimizer iterations, checked at validation time.
    dtype : {'float64', 'float32'}
    random_state : int
    """

    def __init__(self, patch_format="stacked2d", patch_size=24, stack=3, conv_maps=(20, 50),
                 kernel_size=5, dense_units=(1000,), activation="relu", dropout=0.0,
                 optimizer="sgd", learning_rate=0.01, momentum=0.9, batch_size=50,
                 reg="none", reg_lambda=0.0, improvement_threshold=0.01,
                 validation_fraction=0.25, max_iter=None, dtype="float64", random_state=42,
                 verbose=0):
        self.patch_format = patch_format
        self.patch_size = patch_size
        self.stack = stack
        self.conv_maps = conv_maps
        self.kernel_size = kernel_size
        self.dense_units = dense_units
        self.activation = activation
        self.dropout = dropout
        self.optimizer = optimizer
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.batch_size = batch_size
        self.reg = reg
        self.reg_lambda = reg_lambda
        self.improvement_threshold = improvement_threshold
        self.validation_fraction = validation_fraction
        self.max_iter = max_iter
        self.dtype = dtype
        self.random_state = random_state
        self.verbose = verbose

    # -- construction -----------------------------------------------------

    @property
    def format(self) -> PatchFormat:
        layers = self.stack if self.patch_format == "stacked2d" else 1
        return PatchFormat(self.patch_format, self.patch_size, layers)

    def build_spec(self) -> nn.NetworkSpec:
        return build_architecture(self.format, tuple(self.conv_maps), self.kernel_size,
                                  tuple(self.dense_units), self.activation,
                                  dropout=self.dropout)

    def optim_config(self) -> optim.OptimConfig:
        if self.optimizer not in _OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        return optim.OptimConfig(
            algorithm=_OPTIMIZERS[self.optimizer],
            learning_rate=self.learning_rate,
            momentum=self.momentum if self.optimizer != "sgd" else 0.0,
            reg=optim.Regularization(self.reg, self.reg_lambda),
        )

    @classmethod
    def from_network(cls, spec: nn.NetworkSpec, params, **kwargs) -> "PatchCNNClassifier":
        """Wrap an already-trained network (e.g. one read from a model file)."""
        from .presets import format_from_spec

        fmt = format_from_spec(spec)
        est = cls(patch_format=fmt.kind, patch_size=fmt.size, stack=fmt.layers, **kwargs)
        est.spec_ = spec
        est.params_ = np.asarray(params, dtype=np.dtype(est.dtype))
        est.classes_ = np.arange(spec.output_shape[0])
        est.n_features_in_ = int(np.prod(spec.input_shape))
        return est

    # -- training ---------------------------------------------------------

    def fit(self, X, y, X_val=None, y_val=None):
        spec = self.build_spec()
        dtype = np.dtype(self.dtype)
        X = check_patches(X, spec.input_shape)
        n_classes = spec.output_shape[0]
        y = check_targets(y, X.shape[0], n_classes)
        rng = np.random.default_rng(self.random_state)
        if X_val is None:
            n_val = max(1, int(round(self.validation_fraction * X.shape[0])))
            perm = rng.permutation(X.shape[0])
            X_val, y_val = X[perm[:n_val]], y[perm[:n_val]]
            X, y = X[perm[n_val:]], y[perm[n_val:]]
        else:
            X_val = check_patches(X_val, spec.input_shape, "X_val")
            y_val = check_targets(y_val, X_val.shape[0], n_classes)
        X = X.astype(dtype, copy=False)
        X_val = X_val.astype(dtype, copy=False)

        config = self.optim_config()
        params = optim.init_params(spec, seed=int(rng.integers(2**32)), dtype=dtype)
        state = optim.OptimState()
        n = X.shape[0]
        batch = n if config.algorithm == "rprop" else int(self.batch_size)
        if batch < 1:
            raise ValueError("batch_size must be >= 1")
        period = math.ceil(n / batch)
        stopper = EarlyStopping(period, self.improvement_threshold)
        drop = nn.has_dropout(spec)
        mode = "train" if drop else "infer"

        self.spec_ = spec
        self.classes_ = np.arange(n_classes)
        self.n_features_in_ = int(np.prod(spec.input_shape))

        val_score = self._val_loss(spec, params, X_val, y_val)
        stopper.start(val_score)
        best = params.copy()
        history = [{"iteration": 0, "train_loss": float("nan"), "val_error": val_score,
                    "val_misclass": self._misclass(spec, params, X_val, y_val),
                    "timestamp_ms": int(time.time() * 1000), "accepted": False}]
        it = 0
        train_time = 0.0
        stop_reason = "early_stop"
        while True:
            t0 = time.perf_counter()
            order = rng.permutation(n)
            losses = []
            for b in range(period):
                idx = order[b * batch:(b + 1) * batch]
                value, grad = optim.batch_loss_and_grad(spec, params, X[idx], y[idx],
                                                        mode=mode, rng=rng if drop else None)
                if config.reg.kind != "none":
                    value += optim.reg_penalty(config.reg, params, spec.weight_mask)
                    grad += optim.reg_grad(config.reg, params, spec.weight_mask)
                if not np.isfinite(value) or not np.isfinite(grad).all():
                    raise DivergenceError(f"non-finite loss at iteration {it + 1}")
                params, state = optim.step(params, grad.astype(dtype, copy=False), config, state)
                losses.append(value)
                it += 1
            train_time += time.perf_counter() - t0
            val_score = self._val_loss(spec, params, X_val, y_val)
            if not np.isfinite(val_score):
                raise DivergenceError(f"non-finite validation loss at iteration {it}")
            accepted = stopper.update(it, val_score)
            if accepted:
                best = params.copy()
            history.append({"iteration": it, "train_loss": float(np.mean(losses)),
                            "val_error": val_score,
                            "val_misclass": self._misclass(spec, params, X_val, y_val),
                            "timestamp_ms": int(time.time() * 1000), "accepted": accepted})
            if self.verbose:
                log.info("iter %d train %.4f val %.4f%s", it, np.mean(losses), val_score,
                         " *" if accepted else "")
            if stopper.done(it):
                break
            if self.max_iter is not None and it >= self.max_iter:
                stop_reason = "max_iter"
                break

        self.params_ = best
        self.history_ = history
        self.n_iter_ = it
        self.period_ = period
        self.best_iteration_ = stopper.accepted[-1] if stopper.accepted else 0
        self.best_val_score_ = stopper.best
        self.best_val_misclass_ = self._misclass(spec, best, X_val, y_val)
        self.stop_reason_ = stop_reason
        self.train_time_ = train_time
        self.iters_per_minute_ = it / (train_time / 60.0) if train_time > 0 else float("inf")
        return self

    # -- inference --------------------------------------------------------

    def _proba(self, spec, params, X):
        return network_proba(spec, params, X)

    def _val_loss(self, spec, params, X, y) -> float:
        return cross_entropy(spec, params, X, y)

    def _misclass(self, spec, params, X, y) -> float:
        return float(np.mean(network_proba(spec, params, X).argmax(1) != y))

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_patches(X, self.spec_.input_shape)
        return self._proba(self.spec_, self.params_, X)

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[proba.argmax(axis=1)]

    def loss(self, X, y) -> float:
        """Mean cross-entropy of the fitted network on ``(X, y)``."""
        check_is_fitted(self, "params_")
        y = check_targets(y, len(X), len(self.classes_))
        return float(nn.loss("cross_entropy_softmax", self.predict_proba(X), y))

    def save(self, path, extra=None) -> None:
        check_is_fitted(self, "params_")
        meta = {"patch_format": self.format.to_dict()}
        meta.update(extra or {})
        nn.save_model(path, self.spec_, self.params_.astype(np.float64), meta)

    @classmethod
    def load(cls, path, **kwargs) -> "PatchCNNClassifier":
        spec, params, _ = nn.load_model(path)
        return cls.from_network(spec, params, **kwargs)
