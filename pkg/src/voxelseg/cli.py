"""Command-line entry point: ``voxelseg <command> [flags]``.

Exit codes are 0 on success, 1 on a usage error and 2 on a runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import nn, optim
from .phantom import Dataset, PhantomConfig, write_dataset
from .presets import build_architecture, check_architecture, format_from_spec
from .sampler import FORMATS, PatchFormat, draw_dataset_samples, write_patches
from .trainer import RunReport, TrainConfig, evaluate_run, label_image, train, write_history
from .volume import postprocess, read_vvol, write_vvol

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "VOXELSEG_THREADS"

log = logging.getLogger("voxelseg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except for flags whose default is unset."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


def _dims(text):
    try:
        dims = tuple(int(t) for t in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected X,Y,Z integers, got {text!r}")
    if len(dims) != 3 or min(dims) < 1:
        raise argparse.ArgumentTypeError(f"expected three positive extents, got {text!r}")
    return dims


def _int_list(text):
    try:
        return tuple(int(t) for t in text.split(",") if t)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _formats(text):
    items = [t.strip() for t in text.split(",") if t.strip()]
    bad = [t for t in items if t not in FORMATS]
    if bad or not items:
        raise argparse.ArgumentTypeError(f"formats must be drawn from {FORMATS}, got {text!r}")
    return items


def _existing(path, kind="file"):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{kind} not found: {p}")
    return p


def _add_format(p, default_size=12, allow_all=False):
    choices = FORMATS + (("all",) if allow_all else ())
    p.add_argument("--format", choices=choices, default="all" if allow_all else "stacked2d",
                   help="patch format")
    p.add_argument("--patch-size", type=int, default=default_size,
                   help="patch edge length in voxels")
    p.add_argument("--stack", type=int, default=3,
                   help="slice count for stacked2d patches")


def build_parser() -> argparse.ArgumentParser:
    fmt = _HelpFormatter
    parser = _Parser(prog="voxelseg", description="Patch-based CNN voxel segmentation.",
                     formatter_class=fmt)
    parser.add_argument("--threads", type=int, default=None,
                        help=f"BLAS/OpenMP thread cap; falls back to ${THREADS_ENV}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", metavar="command", required=True)

    p = sub.add_parser("phantom", help="write a synthetic phantom dataset",
                       formatter_class=fmt)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=20, help="number of images")
    p.add_argument("--dims", type=_dims, default="64,64,64", help="volume extents X,Y,Z")
    p.add_argument("--seed", type=int, default=42, help="random seed")

    p = sub.add_parser("sample", help="draw class-balanced patches to a VPAT1 file",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    _add_format(p)
    p.add_argument("--split", choices=("train", "val", "test"), default="train",
                   help="image split to sample from")
    p.add_argument("--count", type=int, default=None,
                   help="patch count, a multiple of 4 (default: desk-scale count of the split)")
    p.add_argument("--out", required=True, help="output VPAT1 file")
    p.add_argument("--seed", type=int, default=42, help="random seed")

    p = sub.add_parser("train", help="train a network with early stopping",
                       formatter_class=fmt)
    p.add_argument("--data", required=True, help="dataset directory")
    _add_format(p)
    p.add_argument("--batch-size", type=int, default=50, help="minibatch size")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--optimizer", choices=("sgd", "momentum", "rprop"), default="sgd",
                   help="update rule")
    p.add_argument("--momentum", type=float, default=0.9, help="momentum coefficient")
    p.add_argument("--reg", choices=("none", "l1", "l2"), default="none",
                   help="weight penalty")
    p.add_argument("--lambda", dest="reg_lambda", type=float, default=0.0,
                   help="penalty strength")
    p.add_argument("--dropout", type=float, default=0.0, help="dropout rate on dense layers")
    p.add_argument("--conv-maps", type=_int_list, default="20,50",
                   help="feature maps of the two convolutions, comma separated")
    p.add_argument("--dense-units", type=_int_list, default="1000",
                   help="hidden dense widths, comma separated")
    p.add_argument("--scale", type=float, default=TrainConfig.scale,
                   help="patch count factor relative to 24000/8000/8000")
    p.add_argument("--max-iter", type=int, default=None, help="hard iteration cap")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="training precision")
    p.add_argument("--min-blob", type=int, default=500,
                   help="post-processing blob threshold for the report")
    p.add_argument("--seed", type=int, default=42, help="random seed")
    p.add_argument("--out", required=True, help="output model file")
    p.add_argument("--history", default=None, help="history CSV; MODEL.history.csv when omitted")
    p.add_argument("--report", default=None, help="run report file (key=value, plus .json)")

    p = sub.add_parser("label", help="segment a volume with a trained model",
                       formatter_class=fmt)
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--image", required=True, help="input intensity VVOL1 file")
    p.add_argument("--out", required=True, help="output label VVOL1 file")
    p.add_argument("--min-blob", type=int, default=500,
                   help="blobs smaller than this are relabelled; 0 disables post-processing")

    p = sub.add_parser("eval", help="evaluate a model on the test split", formatter_class=fmt)
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--report", required=True, help="run report file (key=value, plus .json)")
    p.add_argument("--min-blob", type=int, default=500, help="post-processing blob threshold")
    p.add_argument("--image-index", type=int, default=0, help="test image used for FP/FN")
    p.add_argument("--seed", type=int, default=None,
                   help="patch seed (default: the seed the model was trained with, else 42)")

    p = sub.add_parser("gradcheck", help="finite-difference check of the reduced presets",
                       formatter_class=fmt)
    p.add_argument("--format", choices=FORMATS + ("all",), default="all", help="preset")
    p.add_argument("--patch-size", type=int, default=None,
                   help="patch size (default: 12 for 2D formats, 9 for 3d)")
    p.add_argument("--stack", type=int, default=3, help="stacked2d slice count")
    p.add_argument("--tolerance", type=float, default=1e-6, help="max relative error")
    p.add_argument("--seeds", type=int, default=1, help="random instances per preset")
    p.add_argument("--batch", type=int, default=2, help="samples per instance")
    p.add_argument("--seed", type=int, default=42, help="first instance seed")

    p = sub.add_parser("bench", help="measure training iterations per minute",
                       formatter_class=fmt)
    p.add_argument("--formats", type=_formats, default=",".join(FORMATS),
                   help="comma-separated formats")
    p.add_argument("--minutes", type=float, default=0.25, help="time budget per format")
    p.add_argument("--patch-size", type=int, default=12, help="patch size")
    p.add_argument("--stack", type=int, default=3, help="stacked2d slice count")
    p.add_argument("--batch-size", type=int, default=50, help="minibatch size")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32",
                   help="precision")
    p.add_argument("--seed", type=int, default=42, help="random seed")
    p.add_argument("--out", default=None, help="optional JSON output file")
    return parser


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def _format(args, kind=None, size=None) -> PatchFormat:
    kind = kind or args.format
    size = args.patch_size if size is None else size
    return PatchFormat(kind, size, args.stack if kind == "stacked2d" else 1)


def _load_dataset(path) -> Dataset:
    _existing(path, "dataset directory")
    return Dataset.load(path)


def cmd_phantom(args, out):
    if args.count < 1:
        raise ValueError("--count must be >= 1")
    path = write_dataset(args.out, args.count, args.seed, PhantomConfig(dims=args.dims))
    print(f"wrote {args.count} images and {path}", file=out)


def cmd_sample(args, out):
    ds = _load_dataset(args.data)
    fmt = _format(args)
    count = args.count if args.count is not None else TrainConfig().count(args.split)
    images = [(im.volume, im.labels, None) for im in ds.split(args.split)]
    if not images:
        raise ValueError(f"dataset has no {args.split} images")
    samples = draw_dataset_samples(images, count, fmt, np.random.default_rng(args.seed))
    write_patches(args.out, samples, fmt)
    print(f"wrote {len(samples)} {fmt.kind} patches to {args.out}", file=out)


def cmd_train(args, out):
    ds = _load_dataset(args.data)
    cfg = TrainConfig(patch_format=args.format, patch_size=args.patch_size, stack=args.stack,
                      conv_maps=args.conv_maps, dense_units=args.dense_units,
                      dropout=args.dropout,
                      batch_size=args.batch_size, learning_rate=args.lr,
                      momentum=args.momentum, optimizer=args.optimizer, reg=args.reg,
                      reg_lambda=args.reg_lambda, scale=args.scale, seed=args.seed,
                      max_iter=args.max_iter, min_blob=args.min_blob, dtype=args.dtype)
    params, report, history = train(cfg, ds)
    spec = cfg.build_spec()
    extra = {
        "train_config": cfg.to_dict(),
        "best_val_error": report.best_val_error,
        "best_val_misclass": report.best_val_misclass,
        "iterations": report.iterations,
        "best_iteration": report.best_iteration,
        "period": report.period,
        "stop_reason": report.stop_reason,
    }
    nn.save_model(args.out, spec, np.asarray(params, dtype=np.float64), extra)
    write_history(args.history or f"{args.out}.history.csv", history)
    if args.report:
        report.write(args.report)
    print(report.to_text(), end="", file=out)


def _read_model(path):
    _existing(path, "model file")
    return nn.load_model(path)


def cmd_label(args, out):
    spec, params, _ = _read_model(args.model)
    volume = read_vvol(_existing(args.image, "image file"))
    labels = label_image(params, spec, format_from_spec(spec), volume)
    if args.min_blob > 0:
        labels = postprocess(labels, args.min_blob)
    write_vvol(args.out, labels)
    counts = np.bincount(labels.ravel(), minlength=3)
    print(f"wrote {args.out}: negative={counts[0]} left={counts[1]} right={counts[2]}",
          file=out)


def cmd_eval(args, out):
    spec, params, extra = _read_model(args.model)
    ds = _load_dataset(args.data)
    base = extra.get("train_config", {})
    cfg = TrainConfig.from_dict({**base, "min_blob": args.min_blob,
                                 **({"seed": args.seed} if args.seed is not None else {})})
    report = evaluate_run(params, spec, ds, cfg, image_index=args.image_index)
    for key in ("best_val_error", "best_val_misclass", "iterations", "best_iteration",
                "period", "stop_reason"):
        if key in extra:
            setattr(report, key, extra[key])
    report.write(args.report)
    print(report.to_text(), end="", file=out)


def cmd_gradcheck(args, out):
    kinds = FORMATS if args.format == "all" else (args.format,)
    worst = 0.0
    for kind in kinds:
        size = args.patch_size or (9 if kind == "3d" else 12)
        spec = check_architecture(_format(args, kind, size))
        errs = []
        for s in range(args.seeds):
            params, x, y = optim.check_instance(spec, args.seed + s, args.batch)
            errs.append(optim.gradient_check(spec, params, (x, y)))
        e = max(errs)
        worst = max(worst, e)
        status = "PASS" if e < args.tolerance else "FAIL"
        print(f"{status} {kind} size={size} params={spec.n_params} seeds={args.seeds} "
              f"max_rel_error={e:.3e}", file=out)
    if not worst < args.tolerance:
        raise RuntimeError(f"max relative error {worst:.3e} >= tolerance {args.tolerance:g}")


def bench_format(fmt: PatchFormat, seconds: float, batch_size=50, dtype="float32", seed=42,
                 min_iters=3) -> dict:
    """Time SGD iterations of the full-width preset on random patches."""
    spec = build_architecture(fmt)
    rng = np.random.default_rng(seed)
    params = optim.init_params(spec, seed, dtype=np.dtype(dtype))
    x = rng.normal(size=(batch_size,) + spec.input_shape).astype(dtype)
    y = rng.integers(0, 3, batch_size)
    config = optim.OptimConfig(learning_rate=0.01)
    state = optim.OptimState()
    n = 0
    t0 = time.perf_counter()
    while n < min_iters or time.perf_counter() - t0 < seconds:
        _, g = optim.batch_loss_and_grad(spec, params, x, y)
        params, state = optim.step(params, g.astype(params.dtype, copy=False), config, state)
        n += 1
    elapsed = time.perf_counter() - t0
    return {"format": fmt.kind, "patch_size": fmt.size, "n_params": spec.n_params,
            "iterations": n, "seconds": elapsed, "iters_per_minute": 60.0 * n / elapsed}


def cmd_bench(args, out):
    rows = []
    for kind in args.formats:
        row = bench_format(_format(args, kind), 60.0 * args.minutes, args.batch_size,
                           args.dtype, args.seed)
        rows.append(row)
        print(" ".join(f"{k}={v:.1f}" if isinstance(v, float) else f"{k}={v}"
                       for k, v in row.items()), file=out)
    if args.out:
        Path(args.out).write_text(json.dumps(rows, indent=2) + "\n")


COMMANDS = {"phantom": cmd_phantom, "sample": cmd_sample, "train": cmd_train,
            "label": cmd_label, "eval": cmd_eval, "gradcheck": cmd_gradcheck,
            "bench": cmd_bench}


def _thread_limit(n):
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is None:
        return nullcontext()
    if n < 1:
        raise ValueError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def run(argv=None, out=None) -> int:
    """Run one command; returns the process exit code."""
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with _thread_limit(args.threads):
            COMMANDS[args.command](args, out)
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"voxelseg {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main() -> None:
    sys.exit(run())
