"""Slow, obviously-correct reference implementations used as test oracles."""

from __future__ import annotations

import itertools
from collections import deque

import numpy as np


def conv_naive(x, kernels, bias=None):
    """Valid cross-correlation by explicit loops; ``x`` is ``[C, *sp]``."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(kernels, dtype=np.float64)
    ksp = k.shape[2:]
    osp = tuple(s - m + 1 for s, m in zip(x.shape[1:], ksp))
    out = np.zeros((k.shape[0],) + osp)
    for o in range(k.shape[0]):
        for pos in itertools.product(*[range(n) for n in osp]):
            acc = 0.0
            for c in range(x.shape[0]):
                for off in itertools.product(*[range(m) for m in ksp]):
                    idx = tuple(p + d for p, d in zip(pos, off))
                    acc += x[(c,) + idx] * k[(o, c) + off]
            out[(o,) + pos] = acc + (0.0 if bias is None else bias[o])
    return out


def maxpool_naive(x, ph, pw):
    """Returns pooled values and the first row-major argmax of every window."""
    c, h, w = x.shape
    out = np.zeros((c, h // ph, w // pw))
    idx = np.zeros((c, h // ph, w // pw, 2), dtype=np.int64)
    for ch in range(c):
        for i in range(h // ph):
            for j in range(w // pw):
                best, arg = -np.inf, None
                for a in range(ph):
                    for b in range(pw):
                        v = x[ch, i * ph + a, j * pw + b]
                        if v > best:
                            best, arg = v, (i * ph + a, j * pw + b)
                out[ch, i, j] = best
                idx[ch, i, j] = arg
    return out, idx


NEIGHBOURS = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))


def components_bfs(labels):
    """Flood fill over 6-neighbours; blobs numbered in x-fastest scan order.

    Returns ``(ids, sizes, classes)``.
    """
    dims = labels.shape
    ids = np.full(dims, -1, dtype=np.int64)
    sizes, classes = [], []
    for z in range(dims[2]):
        for y in range(dims[1]):
            for x in range(dims[0]):
                if ids[x, y, z] >= 0:
                    continue
                b = len(sizes)
                cls = labels[x, y, z]
                ids[x, y, z] = b
                queue = deque([(x, y, z)])
                n = 0
                while queue:
                    p = queue.popleft()
                    n += 1
                    for d in NEIGHBOURS:
                        q = (p[0] + d[0], p[1] + d[1], p[2] + d[2])
                        if all(0 <= q[i] < dims[i] for i in range(3)) \
                                and ids[q] < 0 and labels[q] == cls:
                            ids[q] = b
                            queue.append(q)
                sizes.append(n)
                classes.append(int(cls))
    return ids, np.array(sizes), np.array(classes)


def postprocess_bruteforce(labels, min_blob):
    """Blob-by-blob relabelling with explicit centroid loops."""
    ids, sizes, classes = components_bfs(labels)
    cents = {}
    for c in (1, 2):
        pts = [p for p in itertools.product(*map(range, labels.shape)) if labels[p] == c]
        if pts:
            cents[c] = np.mean(np.array(pts, dtype=np.float64), axis=0)
    out = labels.copy()
    for b in range(len(sizes)):
        if sizes[b] >= min_blob:
            continue
        members = np.argwhere(ids == b)
        if classes[b] != 0:
            new = 0
        elif not cents:
            new = 0
        else:
            c = members.mean(axis=0)
            best, new = np.inf, 0
            for cls in sorted(cents):
                d = np.sqrt(((c - cents[cls]) ** 2).sum())
                if d < best:
                    best, new = d, cls
        for p in members:
            out[tuple(p)] = new
    return out


def is_edge_scan(labels, voxel, r=2):
    """Neighbourhood scan over the clipped (2r+1)^3 box around ``voxel``."""
    seen = set()
    for d in itertools.product(range(-r, r + 1), repeat=3):
        q = tuple(v + e for v, e in zip(voxel, d))
        if all(0 <= q[i] < labels.shape[i] for i in range(3)):
            seen.add(int(labels[q]))
    return len(seen) > 1


def metrics_loop(pred, truth):
    fp = fn = conf = 0
    for p in itertools.product(*map(range, pred.shape)):
        a, b = pred[p], truth[p]
        if a != 0 and b == 0:
            fp += 1
        elif a == 0 and b != 0:
            fn += 1
        elif a != 0 and b != 0 and a != b:
            conf += 1
    return fp, fn, conf


def rprop_scalar(theta0, grad_fn, steps, eta_plus=1.2, eta_minus=0.5, delta0=0.01,
                 delta_min=1e-6, delta_max=50.0):
    """Per-coordinate RPROP written with plain Python floats."""
    th = [float(t) for t in theta0]
    delta = [delta0] * len(th)
    prev = [0.0] * len(th)
    path = [list(th)]
    for _ in range(steps):
        g = [float(v) for v in grad_fn(np.array(th))]
        for i in range(len(th)):
            s = prev[i] * g[i]
            if s > 0:
                delta[i] = min(delta[i] * eta_plus, delta_max)
            elif s < 0:
                delta[i] = max(delta[i] * eta_minus, delta_min)
            sign = (g[i] > 0) - (g[i] < 0)
            th[i] -= sign * delta[i]
            prev[i] = 0.0 if s < 0 else g[i]
        path.append(list(th))
    return np.array(path)
