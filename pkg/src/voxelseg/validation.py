"""Input validation helpers shared by the estimator and the pipeline functions."""

from __future__ import annotations

import numpy as np


def check_volume(volume, name="volume") -> np.ndarray:
    """Return ``volume`` as a finite 3D float array."""
    v = np.asarray(volume)
    if v.ndim != 3 or min(v.shape) < 1:
        raise ValueError(f"{name} must be a non-empty 3D array, got shape {v.shape}")
    if not np.issubdtype(v.dtype, np.number):
        raise ValueError(f"{name} must be numeric, got dtype {v.dtype}")
    v = v.astype(np.float64, copy=False)
    if not np.isfinite(v).all():
        raise ValueError(f"{name} contains non-finite intensities")
    return v


def check_label_volume(labels, name="labels") -> np.ndarray:
    """Return ``labels`` as a 3D uint8 array with values in {0, 1, 2}."""
    lv = np.asarray(labels)
    if lv.ndim != 3 or min(lv.shape) < 1:
        raise ValueError(f"{name} must be a non-empty 3D array, got shape {lv.shape}")
    if lv.dtype != np.uint8:
        if not np.issubdtype(lv.dtype, np.integer):
            raise ValueError(f"{name} must hold integer classes, got dtype {lv.dtype}")
        lv = lv.astype(np.uint8)
    if lv.size and lv.max() > 2:
        raise ValueError(f"{name} values must lie in {{0, 1, 2}}")
    return lv


def check_pair(volume, labels):
    v = check_volume(volume)
    lv = check_label_volume(labels)
    if v.shape != lv.shape:
        raise ValueError(f"volume {v.shape} and labels {lv.shape} differ in shape")
    return v, lv


def check_voxel(voxel, shape) -> tuple:
    p = tuple(int(c) for c in voxel)
    if len(p) != 3:
        raise ValueError(f"voxel must have three coordinates, got {voxel!r}")
    if any(not 0 <= c < s for c, s in zip(p, shape)):
        raise ValueError(f"voxel {p} outside volume {shape}")
    return p


def check_patches(X, input_shape, name="X") -> np.ndarray:
    """Validate a batch of network inputs shaped ``(n_samples, *input_shape)``."""
    X = np.asarray(X)
    if X.ndim != len(input_shape) + 1 or X.shape[1:] != tuple(input_shape):
        raise ValueError(f"{name} must have shape (n, {', '.join(map(str, input_shape))}), "
                         f"got {X.shape}")
    if X.shape[0] < 1:
        raise ValueError(f"{name} holds no samples")
    if not np.isfinite(X).all():
        raise ValueError(f"{name} contains non-finite values")
    return X


def check_targets(y, n_samples, n_classes) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n_samples,):
        raise ValueError(f"y must have shape ({n_samples},), got {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ValueError("y must hold integer class indices")
    y = y.astype(np.int64)
    if y.min() < 0 or y.max() >= n_classes:
        raise ValueError(f"class indices must lie in [0, {n_classes})")
    return y
