"""Patch extraction in the three network formats and class-balanced voxel sampling."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

from .validation import check_label_volume, check_pair, check_volume, check_voxel
from .volume import image_mask_ranges

FORMATS = ("stacked2d", "triplanar", "3d")
EDGE, POSITIVE, NEGATIVE = "edge", "positive", "negative"
EDGE_BOX = 5
PATCH_MAGIC = b"VPAT1"


class SamplingError(RuntimeError):
    """A sample category could not be satisfied within the rejection budget."""


@dataclass(frozen=True)
class PatchFormat:
    kind: str = "stacked2d"
    size: int = 24
    layers: int = 1

    def __post_init__(self):
        if self.kind not in FORMATS:
            raise ValueError(f"unknown patch format {self.kind!r}; choose from {FORMATS}")
        if self.size < 1:
            raise ValueError("patch size must be >= 1")
        if self.kind == "stacked2d" and (self.layers < 1 or self.layers % 2 == 0):
            raise ValueError("stack layer count must be odd and >= 1")
        if self.kind != "stacked2d" and self.layers != 1:
            object.__setattr__(self, "layers", 1)

    @property
    def input_shape(self) -> tuple:
        s = self.size
        if self.kind == "stacked2d":
            return (self.layers, s, s)
        if self.kind == "triplanar":
            return (3, s, s)
        return (1, s, s, s)

    @property
    def extent(self) -> tuple:
        """Per-axis ``(before, after)`` reach of the patch around its voxel."""
        s = self.size
        a = (s // 2, s - s // 2 - 1)
        if self.kind == "stacked2d":
            h = self.layers // 2
            return (a, a, (h, h))
        return (a, a, a)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "size": self.size, "layers": self.layers}


def Stacked2D(size=24, layers=3) -> PatchFormat:
    return PatchFormat("stacked2d", size, layers)


def TriPlanar(size=24) -> PatchFormat:
    return PatchFormat("triplanar", size)


def Full3D(size=20) -> PatchFormat:
    return PatchFormat("3d", size)


@dataclass
class PatchSample:
    tensors: tuple
    target: int
    voxel: tuple
    image: int = 0
    category: str = ""

    def as_input(self) -> np.ndarray:
        """Concatenate the tensors along the channel axis into one network input."""
        return np.concatenate(self.tensors, axis=0)


# ---------------------------------------------------------------------------
# extraction
# ---------------------------------------------------------------------------


def fits(shape, voxel, fmt: PatchFormat) -> bool:
    return all(c - a >= 0 and c + b < n for c, (a, b), n in zip(voxel, fmt.extent, shape))


def standardize(x: np.ndarray, axes, eps: float = 1e-8) -> np.ndarray:
    mean = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    return (x - mean) / np.sqrt(np.maximum(var, eps))


def extract_batch(volume, voxels, fmt: PatchFormat, clamp: bool = False,
                  normalize: bool = True) -> np.ndarray:
    """Network inputs for many voxels, shaped ``(n, *fmt.input_shape)``.

    With ``clamp`` out-of-volume reads repeat the nearest edge voxel; otherwise
    a patch that leaves the volume raises :class:`ValueError`. With ``normalize``
    each sample, all planes or layers together, is scaled to zero mean and unit
    variance.
    """
    v = np.asarray(volume, dtype=np.float64)
    vox = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    ext = fmt.extent
    if clamp:
        pad = [(a, b) for a, b in ext]
        v = np.pad(v, pad, mode="edge")
        start = vox.copy()
    else:
        bad = [tuple(p) for p in vox if not fits(v.shape, p, fmt)]
        if bad:
            raise ValueError(f"patch around voxel {bad[0]} exceeds volume {v.shape}")
        start = vox - np.array([a for a, _ in ext])
    s = fmt.size
    x0, y0, z0 = start[:, 0], start[:, 1], start[:, 2]
    if fmt.kind == "stacked2d":
        n = fmt.layers
        win = sliding_window_view(v, (s, s, n))[x0, y0, z0]  # (N, s, s, n) as (x, y, z)
        out = np.transpose(win, (0, 3, 1, 2))
    elif fmt.kind == "3d":
        out = sliding_window_view(v, (s, s, s))[x0, y0, z0][:, None]
    else:
        h = s // 2
        cx, cy, cz = x0 + h, y0 + h, z0 + h
        xy = sliding_window_view(v, (s, s, 1))[x0, y0, cz][..., 0]
        xz = sliding_window_view(v, (s, 1, s))[x0, cy, z0][:, :, 0, :]
        yz = sliding_window_view(v, (1, s, s))[cx, y0, z0][:, 0]
        out = np.stack([xy, xz, yz], axis=1)
    out = np.ascontiguousarray(out, dtype=np.float64)
    if normalize:
        out = standardize(out, tuple(range(1, out.ndim)))
    return out


def extract(volume, voxel, fmt: PatchFormat, normalize: bool = True) -> tuple:
    """Patch tensors for one voxel: one ``[n,s,s]``, three ``[1,s,s]`` or one ``[1,s,s,s]``."""
    v = check_volume(volume)
    p = check_voxel(voxel, v.shape)
    x = extract_batch(v, [p], fmt, normalize=normalize)[0]
    if fmt.kind == "triplanar":
        return (x[0:1], x[1:2], x[2:3])
    return (x,)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def edge_map(labels) -> np.ndarray:
    """True where the border-clipped 5x5x5 box around a voxel holds >= 2 classes."""
    lv = check_label_volume(labels)
    hi = ndimage.maximum_filter(lv, size=EDGE_BOX, mode="nearest")
    lo = ndimage.minimum_filter(lv, size=EDGE_BOX, mode="nearest")
    return hi != lo


def is_edge_voxel(labels, voxel) -> bool:
    lv = check_label_volume(labels)
    x, y, z = check_voxel(voxel, lv.shape)
    r = EDGE_BOX // 2
    box = lv[max(x - r, 0):x + r + 1, max(y - r, 0):y + r + 1, max(z - r, 0):z + r + 1]
    return bool(box.min() != box.max())


@dataclass
class _Image:
    volume: np.ndarray
    labels: np.ndarray
    ranges: tuple
    edges: np.ndarray


def _prepare(volume, labels, ranges):
    v, lv = check_pair(volume, labels)
    if ranges is None:
        ranges = image_mask_ranges(v)
    return _Image(v, lv, tuple(tuple(r) for r in ranges), edge_map(lv))


def _accepts(img: _Image, vox, category, fmt):
    ok = np.array([fits(img.volume.shape, p, fmt) for p in vox], dtype=bool)
    x, y, z = vox.T
    if category == EDGE:
        ok &= img.edges[x, y, z]
    elif category == POSITIVE:
        ok &= img.labels[x, y, z] != 0
    else:
        ok &= img.labels[x, y, z] == 0
    return ok


def _draw_category(images, category, n, fmt, rng, max_rejections, chunk=4096):
    picked = []
    tried = 0
    while len(picked) < n:
        if tried >= max_rejections:
            raise SamplingError(
                f"could not draw {n} {category} samples within {max_rejections} rejections"
            )
        m = min(chunk, max_rejections - tried)
        which = rng.integers(0, len(images), m)
        u = rng.random((m, 3))
        for k in range(m):
            img = images[which[k]]
            vox = np.array([[a + int(u[k, ax] * (b - a)) for ax, (a, b) in enumerate(img.ranges)]])
            tried += 1
            if _accepts(img, vox, category, fmt)[0]:
                picked.append((int(which[k]), tuple(int(c) for c in vox[0])))
                if len(picked) == n:
                    break
    return picked


def draw_voxels(images, count, fmt: PatchFormat, rng, max_rejections=10**6):
    """Voxel list ``[(image, voxel, category)]`` with the 50/25/25 edge/positive/negative split."""
    if count % 4:
        raise ValueError(f"sample count must be divisible by 4, got {count}")
    out = []
    for category, n in ((EDGE, count // 2), (POSITIVE, count // 4), (NEGATIVE, count // 4)):
        for i, p in _draw_category(images, category, n, fmt, rng, max_rejections):
            out.append((i, p, category))
    return out


def draw_samples(volume, labels, mask_ranges, count, fmt: PatchFormat, rng,
                 max_rejections=10**6, normalize=True) -> list:
    """Class-balanced patches from one image. See :func:`draw_dataset_samples`."""
    return draw_dataset_samples([(volume, labels, mask_ranges)], count, fmt, rng,
                                max_rejections, normalize)


def draw_dataset_samples(images: Sequence, count, fmt: PatchFormat, rng,
                         max_rejections=10**6, normalize=True) -> list:
    """Class-balanced patches drawn across several images.

    ``images`` holds ``(volume, labels, mask_ranges)`` triples; ``mask_ranges``
    may be None to derive them from the brain bounding box. Each draw picks an
    image and a voxel uniformly inside its mask and is rejected until the
    category holds and the patch fits in the volume: half the samples are edge
    voxels, a quarter positive, a quarter negative.
    """
    prepared = [_prepare(*im) for im in images]
    chosen = draw_voxels(prepared, count, fmt, rng, max_rejections)
    samples = []
    for i, p, category in chosen:
        img = prepared[i]
        x = extract_batch(img.volume, [p], fmt, normalize=normalize)[0]
        tensors = (x[0:1], x[1:2], x[2:3]) if fmt.kind == "triplanar" else (x,)
        samples.append(PatchSample(tensors, int(img.labels[p]), p, i, category))
    return samples


def stack_samples(samples) -> tuple[np.ndarray, np.ndarray]:
    """``(X, y)`` arrays ready for the estimator."""
    X = np.stack([s.as_input() for s in samples])
    y = np.array([s.target for s in samples], dtype=np.int64)
    return X, y


# ---------------------------------------------------------------------------
# VPAT1 files
# ---------------------------------------------------------------------------

_FORMAT_CODES = {"stacked2d": 0, "triplanar": 1, "3d": 2}


def write_patches(path, samples, fmt: PatchFormat) -> None:
    """Write ``VPAT1``: format code (u8), size, layers, count (u32), then per sample
    the f32 input tensor, u8 target and three u32 voxel coordinates."""
    with open(path, "wb") as fh:
        fh.write(PATCH_MAGIC)
        fh.write(struct.pack("<B3I", _FORMAT_CODES[fmt.kind], fmt.size, fmt.layers,
                             len(samples)))
        for s in samples:
            fh.write(s.as_input().astype("<f4").tobytes())
            fh.write(struct.pack("<B3I", s.target, *s.voxel))


def read_patches(path) -> tuple[PatchFormat, list]:
    data = Path(path).read_bytes()
    if data[:5] != PATCH_MAGIC:
        raise ValueError(f"{path}: not a VPAT1 file")
    code, size, layers, count = struct.unpack_from("<B3I", data, 5)
    kind = {v: k for k, v in _FORMAT_CODES.items()}[code]
    fmt = PatchFormat(kind, size, layers)
    n = int(np.prod(fmt.input_shape))
    off = 5 + 13
    samples = []
    for _ in range(count):
        x = np.frombuffer(data, dtype="<f4", count=n, offset=off).reshape(fmt.input_shape)
        off += 4 * n
        target, *vox = struct.unpack_from("<B3I", data, off)
        off += 13
        x = x.astype(np.float64)
        tensors = (x[0:1], x[1:2], x[2:3]) if kind == "triplanar" else (x,)
        samples.append(PatchSample(tensors, target, tuple(vox)))
    return fmt, samples
