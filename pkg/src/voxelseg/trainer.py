"""Experiment orchestration: patch drawing, training, whole-image labeling and reports."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import nn
from .estimator import PatchCNNClassifier, cross_entropy, network_proba  # noqa: F401
from .phantom import SPLITS, Dataset
from .presets import build_architecture, format_from_spec  # noqa: F401  (re-exported)
from .sampler import PatchFormat, draw_dataset_samples, extract_batch, stack_samples
from .stopping import EarlyStopping  # noqa: F401  (re-exported)
from .validation import check_volume
from .volume import image_mask_ranges, postprocess, segmentation_metrics

log = logging.getLogger(__name__)

FULL_COUNTS = {"train": 24000, "val": 8000, "test": 8000}
DESK_SCALE = 0.25
HISTORY_COLUMNS = ("iteration", "train_loss", "val_error", "timestamp_ms")


@dataclass(frozen=True)
class TrainConfig:
    """Everything that determines a training run.

    Patch counts are the full-scale counts times ``scale``, rounded down to a
    multiple of 4 so the edge/positive/negative split is exact.
    """

    patch_format: str = "stacked2d"
    patch_size: int = 12
    stack: int = 3
    conv_maps: tuple = (20, 50)
    kernel_size: int = 5
    dense_units: tuple = (1000,)
    activation: str = "relu"
    dropout: float = 0.0
    batch_size: int = 50
    learning_rate: float = 0.01
    momentum: float = 0.9
    optimizer: str = "sgd"
    reg: str = "none"
    reg_lambda: float = 0.0
    improvement_threshold: float = 0.01
    scale: float = DESK_SCALE
    seed: int = 42
    max_iter: int | None = None
    min_blob: int = 500
    dtype: str = "float32"

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not self.improvement_threshold > 0:
            raise ValueError("improvement_threshold must be > 0")
        if not self.scale > 0:
            raise ValueError("scale must be > 0")
        if self.min_blob < 1:
            raise ValueError("min_blob must be >= 1")
        object.__setattr__(self, "conv_maps", tuple(self.conv_maps))
        object.__setattr__(self, "dense_units", tuple(self.dense_units))
        self.format  # validates kind, size and stack

    @property
    def format(self) -> PatchFormat:
        layers = self.stack if self.patch_format == "stacked2d" else 1
        return PatchFormat(self.patch_format, self.patch_size, layers)

    def count(self, split: str) -> int:
        n = int(FULL_COUNTS[split] * self.scale) // 4 * 4
        return max(n, 4)

    def build_spec(self) -> nn.NetworkSpec:
        return build_architecture(self.format, self.conv_maps, self.kernel_size,
                                  self.dense_units, self.activation, dropout=self.dropout)

    def estimator(self) -> PatchCNNClassifier:
        return PatchCNNClassifier(
            patch_format=self.patch_format, patch_size=self.patch_size, stack=self.stack,
            conv_maps=self.conv_maps, kernel_size=self.kernel_size,
            dense_units=self.dense_units, activation=self.activation, dropout=self.dropout,
            optimizer=self.optimizer, learning_rate=self.learning_rate,
            momentum=self.momentum, batch_size=self.batch_size, reg=self.reg,
            reg_lambda=self.reg_lambda, improvement_threshold=self.improvement_threshold,
            max_iter=self.max_iter, dtype=self.dtype, random_state=self.seed,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_maps"] = list(self.conv_maps)
        d["dense_units"] = list(self.dense_units)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class RunReport:
    """One row of an experiment table.

    Errors are fractions in [0, 1]; ``best_val_error`` is the validation
    cross-entropy at the checkpoint and ``best_val_misclass`` its patch
    misclassification rate. Voxel counts refer to the designated test image
    after post-processing.
    """

    patch_format: str = ""
    patch_size: int = 0
    n_params: int = 0
    best_val_error: float = float("nan")
    best_val_misclass: float = float("nan")
    test_error: float = float("nan")
    false_pos: int = 0
    false_neg: int = 0
    left_right_confusion: int = 0
    iterations: int = 0
    best_iteration: int = 0
    period: int = 0
    stop_reason: str = ""
    wall_time_s: float = 0.0
    iters_per_minute: float = 0.0
    seed: int = 0
    test_image: str = ""
    extra: dict = field(default_factory=dict)

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            if k == "extra":
                for ek, ev in v.items():
                    lines.append(f"extra.{ek}={ev}")
            else:
                lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def write(self, path) -> None:
        """Write ``path`` as key=value text and ``path + '.json'`` as JSON."""
        path = str(path)
        with open(path, "w") as fh:
            fh.write(self.to_text())
        with open(path + ".json", "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# patches
# ---------------------------------------------------------------------------


def split_rng(seed: int, split: str) -> np.random.Generator:
    """Independent generator per split so each split's patches depend only on the seed."""
    return np.random.default_rng([int(seed), SPLITS.index(split)])


def draw_split(dataset: Dataset, split: str, count: int, fmt: PatchFormat, seed: int):
    """``(X, y)`` for ``count`` patches drawn only from the images of ``split``."""
    images = dataset.split(split)
    if not images:
        raise ValueError(f"dataset has no {split} images")
    triples = [(im.volume, im.labels, None) for im in images]
    samples = draw_dataset_samples(triples, count, fmt, split_rng(seed, split))
    return stack_samples(samples)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def _check_disjoint(dataset: Dataset) -> None:
    seen = {}
    for split in SPLITS:
        for im in dataset.split(split):
            if id(im) in seen or im.stem in seen:
                raise ValueError(f"image {im.stem!r} appears in more than one split")
            seen[id(im)] = seen[im.stem] = split


def train(config: TrainConfig, dataset: Dataset):
    """Draw patches, fit, and evaluate.

    Returns ``(params, report, history)`` where ``params`` is the checkpoint
    with the best validation loss and ``history`` the per-validation rows.
    """
    _check_disjoint(dataset)
    fmt = config.format
    t0 = time.perf_counter()
    X, y = draw_split(dataset, "train", config.count("train"), fmt, config.seed)
    Xv, yv = draw_split(dataset, "val", config.count("val"), fmt, config.seed)
    log.info("drew %d train / %d val patches in %.1fs", len(y), len(yv),
             time.perf_counter() - t0)
    est = config.estimator().fit(X, y, Xv, yv)
    report = evaluate_run(est.params_, est.spec_, dataset, config)
    report = replace(
        report,
        best_val_error=float(est.best_val_score_),
        best_val_misclass=float(est.best_val_misclass_),
        iterations=est.n_iter_,
        best_iteration=est.best_iteration_,
        period=est.period_,
        stop_reason=est.stop_reason_,
        wall_time_s=float(est.train_time_),
        iters_per_minute=float(est.iters_per_minute_),
    )
    return est.params_, report, est.history_


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for row in history:
            w.writerow([row["iteration"], repr(float(row["train_loss"])),
                        repr(float(row["val_error"])), row["timestamp_ms"]])


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iteration": int(r["iteration"]), "train_loss": float(r["train_loss"]),
             "val_error": float(r["val_error"]), "timestamp_ms": int(r["timestamp_ms"])}
            for r in rows]


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def predict_patches(params, spec: nn.NetworkSpec, X, chunk: int = 1000) -> np.ndarray:
    """Class probabilities for a patch array, evaluated in chunks."""
    return network_proba(spec, params, X, chunk)


def label_image(params, spec: nn.NetworkSpec, fmt: PatchFormat | None, volume,
                chunk: int = 1000) -> np.ndarray:
    """Classify every voxel of the mask region; everything outside is negative.

    Patches reaching past the volume border repeat the nearest edge voxel.
    """
    v = check_volume(volume)
    fmt = fmt or format_from_spec(spec)
    if tuple(fmt.input_shape) != tuple(spec.input_shape):
        raise ValueError(f"format {fmt} does not match network input {spec.input_shape}")
    ranges = image_mask_ranges(v)
    out = np.zeros(v.shape, dtype=np.uint8)
    grids = np.meshgrid(*[np.arange(a, b) for a, b in ranges], indexing="ij")
    voxels = np.stack([g.ravel() for g in grids], axis=1)
    for a in range(0, len(voxels), chunk):
        vox = voxels[a:a + chunk]
        X = extract_batch(v, vox, fmt, clamp=True)
        cls = predict_patches(params, spec, X, chunk).argmax(axis=1)
        out[vox[:, 0], vox[:, 1], vox[:, 2]] = cls
    return out


def evaluate_run(params, spec: nn.NetworkSpec, dataset: Dataset,
                 config: TrainConfig | None = None, test_patches=None,
                 image_index: int = 0) -> RunReport:
    """Patch test error plus post-processed voxel errors on one test image.

    ``test_patches`` may supply a pre-drawn ``(X, y)``; otherwise patches are
    drawn from the test images with the config's seed and count.
    """
    config = config or TrainConfig()
    fmt = format_from_spec(spec)
    if not dataset.test:
        raise ValueError("dataset has no test images")
    if test_patches is None:
        test_patches = draw_split(dataset, "test", config.count("test"), fmt, config.seed)
    Xt, yt = test_patches
    err = float(np.mean(predict_patches(params, spec, Xt).argmax(axis=1) != yt))
    image = dataset.test[image_index]
    labeled = postprocess(label_image(params, spec, fmt, image.volume), config.min_blob)
    m = segmentation_metrics(labeled, image.labels)
    return RunReport(
        patch_format=fmt.kind, patch_size=fmt.size, n_params=spec.n_params, test_error=err,
        false_pos=m.false_pos, false_neg=m.false_neg,
        left_right_confusion=m.left_right_confusion, seed=config.seed,
        test_image=image.stem,
    )
