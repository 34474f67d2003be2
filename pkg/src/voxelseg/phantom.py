"""Synthetic head phantoms with two curved-tube "hippocampi" and exact labels.

The brain is an ellipsoid of uniform tissue. Each hippocampus is a sphere swept
along a quadratic Bezier curve whose control points are given as fractions of
the brain bounding box; the right one mirrors the left about the centre of the
mask box, so the two differ only in the direction of their tilt. Noise is added
inside the brain only, keeping the background at exactly zero so the brain box
can be recovered by thresholding.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume import (HIPPOCAMPUS_MASK, LEFT, RIGHT, MaskBox, crop_to_bounding_box,
                     mask_voxel_range, write_vvol)

SPLITS = ("train", "val", "test")
REFERENCE_DIM = 64
MAX_REDRAWS = 20


class PhantomGeometryError(ValueError):
    """Raised when the hippocampi would leave the mask box."""


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (64, 64, 64)
    brain_semi_axes: tuple = (0.45, 0.45, 0.45)  # fraction of dims
    # left tube control points, fractions of the brain bounding box
    left_curve: tuple = ((0.47, 0.35, 0.36), (0.49, 0.50, 0.58), (0.56, 0.64, 0.50))
    mirror_x: float = 0.615
    radius: float = 2.8  # voxels at the 64-voxel reference size, scaled with dims
    jitter: float = 0.015  # per-image random shift of each tube, box fraction
    radius_jitter: float = 0.2
    size_jitter: float = 0.03  # relative jitter of the brain semi-axes
    background: float = 0.0
    brain_level: float = 100.0
    hippocampus_level: float = 130.0
    noise_std: float = 12.0
    min_voxels: int = 400  # per-class band at the reference size, scaled with volume
    max_voxels: int = 3000
    mask: MaskBox = HIPPOCAMPUS_MASK
    seed: int = 0

    @property
    def scale(self) -> float:
        """Linear size relative to the 64-voxel reference phantom."""
        return min(self.dims) / REFERENCE_DIM

    @property
    def right_curve(self) -> tuple:
        return tuple((2 * self.mirror_x - x, y, z) for x, y, z in self.left_curve)


def _bezier(ctrl: np.ndarray, n: int = 256) -> np.ndarray:
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * ctrl[0] + 2 * (1 - t) * t * ctrl[1] + t ** 2 * ctrl[2]


def _tube_mask(shape, curve_pts: np.ndarray, radius: float) -> np.ndarray:
    lo = np.maximum(np.floor(curve_pts.min(0) - radius - 1).astype(int), 0)
    hi = np.minimum(np.ceil(curve_pts.max(0) + radius + 2).astype(int), shape)
    grid = np.stack(np.meshgrid(*[np.arange(a, b) for a, b in zip(lo, hi)], indexing="ij"), -1)
    pts = grid.reshape(-1, 3).astype(float)
    d2 = np.full(len(pts), np.inf)
    for c in curve_pts:
        d2 = np.minimum(d2, ((pts - c) ** 2).sum(1))
    out = np.zeros(shape, dtype=bool)
    sub = (d2 <= radius * radius).reshape(grid.shape[:3])
    out[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = sub
    return out


def generate(config: PhantomConfig = PhantomConfig()):
    """Return ``(volume, labels)`` for one phantom image; deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    dims = tuple(int(d) for d in config.dims)
    centre = (np.asarray(dims) - 1) / 2.0
    semi = np.asarray(config.brain_semi_axes) * np.asarray(dims)
    semi = semi * (1.0 + rng.uniform(-config.size_jitter, config.size_jitter, 3))
    idx = np.indices(dims).reshape(3, -1).T.astype(float)
    brain = (((idx - centre) / semi) ** 2).sum(1) <= 1.0
    brain = brain.reshape(dims)
    if not brain.any():
        raise PhantomGeometryError("brain ellipsoid contains no voxels")

    _, offset = crop_to_bounding_box(brain.astype(float))
    box_lo = np.asarray(offset, dtype=float)
    box_ext = np.asarray(crop_to_bounding_box(brain.astype(float))[0].shape, dtype=float)

    labels = np.zeros(dims, dtype=np.uint8)
    for cls, curve in ((LEFT, config.left_curve), (RIGHT, config.right_curve)):
        ctrl = np.asarray(curve, dtype=float)
        ctrl = ctrl + rng.uniform(-config.jitter, config.jitter, 3)
        pts = box_lo + ctrl * box_ext
        r = (config.radius + rng.uniform(-config.radius_jitter, config.radius_jitter)) \
            * config.scale
        tube = _tube_mask(dims, _bezier(pts), r) & brain
        labels[tube & (labels == 0)] = cls

    _check_geometry(config, brain, labels)

    vol = np.where(brain, config.brain_level, config.background)
    vol = np.where(labels > 0, config.hippocampus_level, vol)
    if config.noise_std > 0:
        noise = rng.normal(0.0, config.noise_std, dims)
        vol = np.where(brain, np.maximum(vol + noise, 0.0), vol)
    return vol.astype(np.float64), labels


def _check_geometry(config, brain, labels):
    cropped, offset = crop_to_bounding_box(brain.astype(float))
    ranges = mask_voxel_range(cropped.shape, config.mask)
    inside = np.zeros(labels.shape, dtype=bool)
    inside[tuple(slice(o + a, o + b) for o, (a, b) in zip(offset, ranges))] = True
    cents = {}
    for cls in (LEFT, RIGHT):
        pos = labels == cls
        n = int(pos.sum())
        lo, hi = config.min_voxels * config.scale ** 3, config.max_voxels * config.scale ** 3
        if not lo <= n <= hi:
            raise PhantomGeometryError(
                f"class {cls} has {n} voxels, outside [{lo:.0f}, {hi:.0f}]"
            )
        if (pos & ~inside).any():
            raise PhantomGeometryError(f"class {cls} extends outside the mask box")
        cents[cls] = np.argwhere(pos).mean(0)
    if not cents[LEFT][0] < cents[RIGHT][0]:
        raise PhantomGeometryError("left hippocampus must lie at smaller x than the right")


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


@dataclass
class Image:
    stem: str
    volume: np.ndarray
    labels: np.ndarray


@dataclass
class Dataset:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    test: list = field(default_factory=list)

    def split(self, name) -> list:
        return getattr(self, name)

    @classmethod
    def load(cls, directory) -> "Dataset":
        from .volume import read_vvol

        directory = Path(directory)
        manifest = directory / "manifest.json"
        if not manifest.exists():
            raise FileNotFoundError(f"{manifest}: no dataset manifest")
        entries = json.loads(manifest.read_text())["images"]
        ds = cls()
        for e in entries:
            img = Image(e["stem"], read_vvol(directory / f"{e['stem']}.img.vvol"),
                        read_vvol(directory / f"{e['stem']}.lbl.vvol"))
            ds.split(e["split"]).append(img)
        return ds


def split_counts(count: int) -> tuple:
    """60/20/20 split by image."""
    n_val = round(count * 0.2)
    n_test = round(count * 0.2)
    return count - n_val - n_test, n_val, n_test


def image_configs(count: int, seed: int = 42, base: PhantomConfig = PhantomConfig()):
    seeds = np.random.SeedSequence(seed).generate_state(count)
    return [replace(base, seed=int(s)) for s in seeds]


def generate_valid(config: PhantomConfig):
    """:func:`generate`, redrawing the image seed if the jitter breaks the geometry."""
    cfg = config
    for attempt in range(MAX_REDRAWS):
        try:
            return generate(cfg)
        except PhantomGeometryError:
            if attempt == MAX_REDRAWS - 1:
                raise
            cfg = replace(config, seed=int(np.random.SeedSequence(
                [config.seed, attempt + 1]).generate_state(1)[0]))


def make_dataset(count: int = 20, seed: int = 42, base: PhantomConfig = PhantomConfig()):
    """Generate ``count`` phantoms split 60/20/20 into train/val/test."""
    n_train, n_val, _ = split_counts(count)
    ds = Dataset()
    for i, cfg in enumerate(image_configs(count, seed, base)):
        vol, lab = generate_valid(cfg)
        name = "train" if i < n_train else "val" if i < n_train + n_val else "test"
        ds.split(name).append(Image(f"phantom_{i:03d}", vol, lab))
    return ds


def write_dataset(directory, count: int = 20, seed: int = 42,
                  base: PhantomConfig = PhantomConfig()) -> Path:
    """Write paired ``<stem>.img.vvol`` / ``<stem>.lbl.vvol`` files and ``manifest.json``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    ds = make_dataset(count, seed, base)
    entries = []
    for name in SPLITS:
        for img in ds.split(name):
            write_vvol(directory / f"{img.stem}.img.vvol", img.volume.astype(np.float32))
            write_vvol(directory / f"{img.stem}.lbl.vvol", img.labels)
            entries.append({"stem": img.stem, "split": name})
    manifest = {"seed": seed, "dims": list(base.dims), "images": entries}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path
