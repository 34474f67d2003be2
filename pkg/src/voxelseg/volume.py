"""Intensity and label volumes: cropping, masking, blobs and post-processing.

Volumes are numpy arrays indexed ``[x, y, z]``. Linear voxel indices (used for
blob ordering and file payloads) run x fastest, i.e. Fortran order.
Labels: 0 negative, 1 left, 2 right.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .validation import check_label_volume, check_volume

NEGATIVE, LEFT, RIGHT = 0, 1, 2
VVOL_MAGIC = b"VVOL1"
DTYPE_F32, DTYPE_U8 = 0, 1

# 6-connectivity: faces only
FACE_STRUCTURE = ndimage.generate_binary_structure(3, 1)


@dataclass(frozen=True)
class MaskBox:
    """Normalised ``lo < coordinate < hi`` fractions per axis of the brain box."""

    lo: tuple = (0.39, 0.27, 0.19)
    hi: tuple = (0.84, 0.70, 0.83)

    def __post_init__(self):
        if len(self.lo) != 3 or len(self.hi) != 3:
            raise ValueError("MaskBox needs three lo and three hi fractions")
        for a, b in zip(self.lo, self.hi):
            if not 0.0 <= a < b <= 1.0:
                raise ValueError(f"need 0 <= lo < hi <= 1, got ({a}, {b})")


HIPPOCAMPUS_MASK = MaskBox()
FULL_MASK = MaskBox((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))


@dataclass
class Blob:
    label: int
    voxels: np.ndarray  # (n, 3) integer coordinates, ascending linear index
    size: int
    centroid: np.ndarray


def crop_to_bounding_box(volume, threshold: float = 0.0):
    """Tightest box around voxels brighter than ``threshold``.

    Returns ``(cropped, offset)``.
    """
    v = check_volume(volume)
    fg = v > threshold
    if not fg.any():
        raise ValueError(f"no voxel exceeds threshold {threshold}")
    lo, hi = [], []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        idx = np.flatnonzero(fg.any(axis=other))
        lo.append(int(idx[0]))
        hi.append(int(idx[-1]) + 1)
    sl = tuple(slice(a, b) for a, b in zip(lo, hi))
    return v[sl], tuple(lo)


def mask_voxel_range(dims, box: MaskBox = HIPPOCAMPUS_MASK):
    """Half-open ``[floor(lo*dim), ceil(hi*dim))`` per axis, clamped to the volume."""
    out = []
    for dim, a, b in zip(dims, box.lo, box.hi):
        if dim < 1:
            raise ValueError(f"dims must be positive, got {tuple(dims)}")
        # round first so 0.84*100 == 84 does not ceil to 85
        lo = math.floor(round(a * dim, 9))
        hi = math.ceil(round(b * dim, 9))
        out.append((max(0, min(lo, dim)), max(0, min(hi, dim))))
    return tuple(out)


def image_mask_ranges(volume, box: MaskBox = HIPPOCAMPUS_MASK, threshold: float = 0.0):
    """Mask ranges of the brain bounding box, in coordinates of the uncropped volume."""
    cropped, offset = crop_to_bounding_box(volume, threshold)
    rng = mask_voxel_range(cropped.shape, box)
    return tuple((o + a, o + b) for o, (a, b) in zip(offset, rng))


def mask_array(shape, ranges) -> np.ndarray:
    m = np.zeros(shape, dtype=bool)
    m[tuple(slice(a, b) for a, b in ranges)] = True
    return m


# ---------------------------------------------------------------------------
# blobs
# ---------------------------------------------------------------------------


def label_blobs(labels):
    """Blob id per voxel, numbered by ascending minimum linear index.

    Returns ``(ids, sizes, classes, first)`` where ``ids`` has the volume's shape
    and the per-blob arrays are indexed by blob id.
    """
    lv = check_label_volume(labels)
    ids = np.full(lv.shape, -1, dtype=np.int64)
    total = 0
    for cls in np.unique(lv):
        comp, n = ndimage.label(lv == cls, structure=FACE_STRUCTURE)
        sel = comp > 0
        ids[sel] = comp[sel] - 1 + total
        total += n
    flat = ids.ravel(order="F")
    first = np.full(total, flat.size, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(flat.size))
    order = np.argsort(first, kind="stable")
    rank = np.empty(total, dtype=np.int64)
    rank[order] = np.arange(total)
    ids = rank[ids]
    sizes = np.bincount(ids.ravel(), minlength=total)
    classes = lv.ravel(order="F")[first[order]]
    return ids, sizes, classes, first[order]


def _blob_centroids(ids, sizes):
    coords = np.indices(ids.shape).reshape(3, -1)
    flat = ids.ravel()
    return np.stack(
        [np.bincount(flat, weights=coords[a], minlength=sizes.size) for a in range(3)], axis=1
    ) / sizes[:, None]


def connected_components(labels) -> list[Blob]:
    """Maximal 6-connected same-class regions, ordered by minimum linear index."""
    ids, sizes, classes, _ = label_blobs(labels)
    flat = ids.ravel(order="F")
    order = np.argsort(flat, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    cents = _blob_centroids(ids, sizes)
    dims = ids.shape
    blobs = []
    for b in range(sizes.size):
        lin = order[bounds[b]:bounds[b + 1]]
        vox = np.stack(np.unravel_index(lin, dims, order="F"), axis=1)
        blobs.append(Blob(int(classes[b]), vox, int(sizes[b]), cents[b]))
    return blobs


def class_centroid(labels, cls) -> np.ndarray | None:
    pts = np.argwhere(labels == cls)
    return pts.mean(axis=0) if len(pts) else None


def postprocess(labels, min_blob: int = 500) -> np.ndarray:
    """Remove small positive blobs and fill small negative blobs.

    Centroids of the left and right classes are taken from the input. Every
    blob smaller than ``min_blob`` is then relabelled in one simultaneous pass:
    positive blobs become negative, negative blobs take the class whose centroid
    is nearest to the blob centroid (left on ties). Small negative blobs are left
    alone when the input has no positive voxels.
    """
    if min_blob < 1:
        raise ValueError("min_blob must be >= 1")
    lv = check_label_volume(labels)
    ids, sizes, classes, _ = label_blobs(lv)
    small = sizes < min_blob
    if not small.any():
        return lv.copy()
    target = classes.astype(np.uint8).copy()
    target[small & (classes != NEGATIVE)] = NEGATIVE
    cents = {c: class_centroid(lv, c) for c in (LEFT, RIGHT)}
    cents = {c: p for c, p in cents.items() if p is not None}
    holes = small & (classes == NEGATIVE)
    if cents and holes.any():
        bc = _blob_centroids(ids, sizes)[holes]
        keys = sorted(cents)
        dist = np.stack([np.linalg.norm(bc - cents[c], axis=1) for c in keys], axis=1)
        target[holes] = np.asarray(keys, dtype=np.uint8)[dist.argmin(axis=1)]
    return target[ids]


@dataclass
class SegmentationMetrics:
    false_pos: int
    false_neg: int
    left_right_confusion: int
    true_pos: int
    per_class: dict
    precision: float
    recall: float

    def as_dict(self) -> dict:
        return {
            "false_pos": self.false_pos,
            "false_neg": self.false_neg,
            "left_right_confusion": self.left_right_confusion,
            "true_pos": self.true_pos,
            "per_class": self.per_class,
            "precision": self.precision,
            "recall": self.recall,
        }


def segmentation_metrics(predicted, truth) -> SegmentationMetrics:
    """Voxel counts comparing two labelings.

    ``false_pos`` counts predicted-positive voxels that are negative in truth,
    ``false_neg`` truth-positive voxels predicted negative. Voxels positive in
    both but with the wrong side are reported as ``left_right_confusion``.
    """
    p = check_label_volume(predicted)
    t = check_label_volume(truth)
    if p.shape != t.shape:
        raise ValueError(f"dims differ: {p.shape} vs {t.shape}")
    ppos, tpos = p != NEGATIVE, t != NEGATIVE
    fp = int((ppos & ~tpos).sum())
    fn = int((~ppos & tpos).sum())
    conf = int((ppos & tpos & (p != t)).sum())
    tp = int((ppos & (p == t)).sum())
    per_class = {}
    for c in (LEFT, RIGHT):
        per_class[c] = {
            "true_pos": int(((p == c) & (t == c)).sum()),
            "false_pos": int(((p == c) & (t != c)).sum()),
            "false_neg": int(((p != c) & (t == c)).sum()),
            "truth": int((t == c).sum()),
            "predicted": int((p == c).sum()),
        }
    npred, ntrue = int(ppos.sum()), int(tpos.sum())
    precision = tp / npred if npred else 1.0
    recall = tp / ntrue if ntrue else 1.0
    return SegmentationMetrics(fp, fn, conf, tp, per_class, precision, recall)


# ---------------------------------------------------------------------------
# VVOL1 files
# ---------------------------------------------------------------------------


def write_vvol(path, array) -> None:
    """Write a volume (float -> f32 payload) or label volume (uint8 payload)."""
    a = np.asarray(array)
    if a.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {a.shape}")
    if a.dtype == np.uint8:
        code, payload = DTYPE_U8, a.astype("u1")
    else:
        code, payload = DTYPE_F32, a.astype("<f4")
    with open(path, "wb") as fh:
        fh.write(VVOL_MAGIC)
        fh.write(struct.pack("<B3I", code, *a.shape))
        fh.write(payload.tobytes(order="F"))


def read_vvol(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:5] != VVOL_MAGIC:
        raise ValueError(f"{path}: not a VVOL1 file")
    code, x, y, z = struct.unpack_from("<B3I", data, 5)
    dtype = {DTYPE_F32: "<f4", DTYPE_U8: "u1"}.get(code)
    if dtype is None:
        raise ValueError(f"{path}: unknown dtype code {code}")
    arr = np.frombuffer(data, dtype=dtype, offset=18)
    if arr.size != x * y * z:
        raise ValueError(f"{path}: payload holds {arr.size} voxels, header says {x * y * z}")
    arr = arr.reshape((x, y, z), order="F")
    return arr.astype(np.float64) if code == DTYPE_F32 else np.ascontiguousarray(arr)
