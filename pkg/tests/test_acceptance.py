"""Acceptance suite. Each test prints one PASS/FAIL line with its measured value.

The desk-scale training runs are shared by a module fixture: three formats times
three seeds on the default 12/4/4 phantom dataset. Expect roughly an hour on one
core.
"""

import time

import numpy as np
import pytest
from scipy import ndimage

from voxelseg import nn, optim, phantom, tensor as T, trainer
from voxelseg.nn import Dense, Dropout, NetworkSpec
from voxelseg.presets import build_architecture, check_architecture, flatten_width
from voxelseg.sampler import FORMATS, PatchFormat, draw_dataset_samples
from voxelseg.stopping import EarlyStopping, satisfies_stopping_law
from voxelseg.volume import HIPPOCAMPUS_MASK, label_blobs, postprocess
from oracles import (components_bfs, conv_naive, maxpool_naive, postprocess_bruteforce,
                     rprop_scalar)

SEEDS = (42, 43, 44)
# patch test error bounds frozen from pilot runs at seed 42 (pilot value plus margin)
BASELINE_TEST_ERROR = {"stacked2d": 0.06, "triplanar": 0.085, "3d": 0.04}
# first step with ||theta|| < 1e-3 for the scripted bowl, from the scalar oracle
RPROP_BOWL_STEPS = 38


def report(capsys, name, ok, detail):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}", flush=True)
    assert ok, detail


@pytest.fixture(scope="module")
def desk_runs():
    dataset = phantom.make_dataset(20, 42)
    runs = {}
    for seed in SEEDS:
        for kind in FORMATS:
            cfg = trainer.TrainConfig(patch_format=kind, seed=seed)
            t0 = time.perf_counter()
            _, rep, history = trainer.train(cfg, dataset)
            runs[kind, seed] = (rep, history, time.perf_counter() - t0)
    return runs


def test_gradient_correctness(capsys):
    t0 = time.process_time()
    presets = [PatchFormat("stacked2d", 12, 3), PatchFormat("triplanar", 12),
               PatchFormat("3d", 9)]
    worst = {}
    for fmt in presets:
        spec = check_architecture(fmt)
        errs = []
        for seed in range(20):
            params, x, y = optim.check_instance(spec, seed)
            errs.append(optim.gradient_check(spec, params, (x, y)))
        worst[fmt.kind] = max(errs)
    elapsed = time.process_time() - t0
    ok = max(worst.values()) < 1e-6 and elapsed < 300
    detail = ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
    report(capsys, "gradient correctness", ok,
           f"max relative error over 20 seeds: {detail}; {elapsed:.0f} s CPU")


def _random_conv_instance(rng, ndim):
    c, m = rng.integers(1, 3, 2)
    hi = 16 if ndim == 2 else 9
    sp = tuple(int(s) for s in rng.integers(1, hi + 1, ndim))
    k = tuple(int(rng.integers(1, min(s, 5 if ndim == 2 else 3) + 1)) for s in sp)
    return rng.normal(size=(c,) + sp), rng.normal(size=(m, c) + k), rng.normal(size=m)


def test_kernel_oracles(capsys):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst2 = worst3 = worst_pool = 0.0
    partitions = 0
    for _ in range(100):
        x, k, b = _random_conv_instance(rng, 2)
        worst2 = max(worst2, np.abs(T.conv2d_valid(x, k, b) - conv_naive(x, k, b)).max())
        x, k, b = _random_conv_instance(rng, 3)
        worst3 = max(worst3, np.abs(T.conv3d_valid(x, k, b) - conv_naive(x, k, b)).max())
        ph, pw = (int(v) for v in rng.integers(1, 5, 2))
        x = rng.normal(size=(int(rng.integers(1, 4)), ph * int(rng.integers(1, 16 // ph + 1)),
                             pw * int(rng.integers(1, 16 // pw + 1))))
        out, idx = T.maxpool2d(x, ph, pw)
        ref, ridx = maxpool_naive(x, ph, pw)
        worst_pool = max(worst_pool, np.abs(out - ref).max())
        worst_pool = max(worst_pool, float(np.any(idx != ridx)))
        dims = tuple(int(s) for s in rng.integers(1, 17, 3))
        lab = rng.choice(3, size=dims, p=rng.dirichlet(np.ones(3))).astype(np.uint8)
        ids, sizes, classes, _ = label_blobs(lab)
        rids, rsizes, rclasses = components_bfs(lab)
        partitions += (np.array_equal(ids, rids) and np.array_equal(sizes, rsizes)
                       and np.array_equal(classes, rclasses))
    elapsed = time.perf_counter() - t0
    ok = max(worst2, worst3, worst_pool) <= 1e-10 and partitions == 100 and elapsed < 60
    report(capsys, "kernel oracles", ok,
           f"100 instances each; max abs diff conv2d {worst2:.1e}, conv3d {worst3:.1e}, "
           f"maxpool {worst_pool:.1e}; components identical {partitions}/100; {elapsed:.1f} s")


def test_constant_fidelity(capsys):
    cfg = trainer.TrainConfig()
    checks = {
        "batch 50": cfg.batch_size == 50,
        "lr 0.01": cfg.learning_rate == 0.01,
        "min blob 500": cfg.min_blob == 500,
        "mask fractions": (HIPPOCAMPUS_MASK.lo, HIPPOCAMPUS_MASK.hi)
        == ((0.39, 0.27, 0.19), (0.84, 0.70, 0.83)),
    }
    ds = phantom.make_dataset(1, 0)
    picked = draw_dataset_samples([(ds.train[0].volume, ds.train[0].labels, None)], 400,
                                  PatchFormat("stacked2d", 12, 3), np.random.default_rng(0))
    counts = {c: sum(s.category == c for s in picked) for c in ("edge", "positive", "negative")}
    checks["split 50/25/25"] = list(counts.values()) == [200, 100, 100]
    for fmt, width in ((PatchFormat("stacked2d", 24, 3), 12800),
                       (PatchFormat("triplanar", 24), 38400), (PatchFormat("3d", 20), 86400)):
        spec = build_architecture(fmt)
        convs = [layer for layer in spec.layers if isinstance(layer, nn.Parallel)]
        if convs:
            maps = [layer.out_maps for layer in convs[0].branches[0] if hasattr(layer, "out_maps")]
        else:
            maps = [layer.out_maps for layer in spec.layers if hasattr(layer, "out_maps")]
        dense = [layer.out_features for layer in spec.layers if isinstance(layer, Dense)]
        checks[f"{fmt.kind} maps 20/50"] = maps == [20, 50]
        checks[f"{fmt.kind} dense 1000"] = dense[:-1] == [1000]
        checks[f"{fmt.kind} flatten {width}"] = flatten_width(spec) == width
    failed = [k for k, v in checks.items() if not v]
    report(capsys, "constant fidelity", not failed,
           f"{len(checks) - len(failed)}/{len(checks)} constants hold"
           + (f"; failed: {', '.join(failed)}" if failed else ""))


@pytest.mark.slow
def test_early_stopping_law(capsys, desk_runs):
    t0 = time.perf_counter()
    es = EarlyStopping(period=100)
    es.start(1.0)
    trace = []
    for it, score in zip(range(100, 1000, 100), (0.9, 0.85, 0.849, 0.80, 0.80, 0.80, 0.80, 0.80)):
        trace.append((it, es.update(it, score), es.termination))
        if es.done(it):
            break
    expected = [(100, True, 200), (200, True, 400), (300, False, 400), (400, True, 800),
                (500, False, 800), (600, False, 800), (700, False, 800), (800, False, 800)]
    scripted = trace == expected and time.perf_counter() - t0 < 1.0
    lawful = {key: satisfies_stopping_law(h, rep.period) or rep.stop_reason == "max_iter"
              for key, (rep, h, _) in desk_runs.items()}
    ok = scripted and all(lawful.values())
    report(capsys, "early-stopping law", ok,
           f"scripted doubling sequence {'matches' if scripted else 'differs'}; "
           f"{sum(lawful.values())}/{len(lawful)} training histories satisfy the law")


@pytest.mark.slow
def test_desk_scale_end_to_end(capsys, desk_runs):
    lines, ok = [], True
    for kind in FORMATS:
        rep, _, elapsed = desk_runs[kind, 42]
        good = rep.test_error < BASELINE_TEST_ERROR[kind] and elapsed < 1800
        ok &= good
        lines.append(f"{kind} {rep.test_error:.4f} < {BASELINE_TEST_ERROR[kind]} "
                     f"({elapsed / 60:.1f} min)")
    report(capsys, "desk-scale end-to-end", ok, "; ".join(lines))


@pytest.mark.slow
def test_ordering(capsys, desk_runs):
    err = {k: np.mean([desk_runs[k, s][0].test_error for s in SEEDS]) for k in FORMATS}
    speed = {k: np.mean([desk_runs[k, s][0].iters_per_minute for s in SEEDS]) for k in FORMATS}
    error_ok = err["triplanar"] <= err["stacked2d"]
    speed_ok = speed["stacked2d"] > speed["triplanar"] > speed["3d"]
    per_seed = "; ".join(
        f"{k} " + "/".join(f"{desk_runs[k, s][0].test_error:.4f}" for s in SEEDS) for k in FORMATS)
    report(capsys, "ordering", error_ok and speed_ok,
           f"test error per seed {per_seed}; mean "
           + ", ".join(f"{k} {v:.4f}" for k, v in err.items())
           + f" (tri-planar <= stacked: {error_ok}); iters/min "
           + ", ".join(f"{k} {v:.0f}" for k, v in speed.items())
           + f" (stacked > tri-planar > 3d: {speed_ok})")


def _blobby_labels(rng):
    dims = tuple(int(s) for s in rng.integers(4, 33, 3))
    field = ndimage.gaussian_filter(rng.normal(size=dims), rng.uniform(0.5, 2.0))
    side = ndimage.gaussian_filter(rng.normal(size=dims), 3.0)
    pos = field > np.quantile(field, rng.uniform(0.4, 0.8))
    lab = np.where(pos, np.where(side > 0, 1, 2), 0)
    speckle = rng.random(dims) < 0.01
    lab[speckle] = rng.integers(0, 3, int(speckle.sum()))
    return lab.astype(np.uint8)


def test_postprocess_oracle(capsys):
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    same = removed = filled = 0
    for _ in range(50):
        lab = _blobby_labels(rng)
        min_blob = int(rng.integers(2, 200))
        out = postprocess(lab, min_blob)
        same += np.array_equal(out, postprocess_bruteforce(lab, min_blob))
        _, sizes, classes, _ = label_blobs(lab)
        small = sizes < min_blob
        removed += int((small & (classes != 0)).sum())
        filled += int((small & (classes == 0)).sum())
    elapsed = time.perf_counter() - t0
    ok = same == 50 and removed > 0 and filled > 0 and elapsed < 60
    report(capsys, "post-processing oracle", ok,
           f"{same}/50 volumes identical ({removed} small positive, {filled} small negative "
           f"blobs exercised); {elapsed:.1f} s")


def test_rprop_bowl(capsys):
    v = np.random.default_rng(0).normal(size=10)
    theta0 = 5.0 * v / np.linalg.norm(v)
    cfg = optim.OptimConfig("rprop")

    def trajectory(scale):
        th, state, path = theta0.copy(), optim.OptimState(), [theta0.copy()]
        for _ in range(200):
            th, state = optim.rprop_step(th, scale * 2.0 * th, cfg, state)
            path.append(th)
        return np.array(path)

    a, b = trajectory(1.0), trajectory(10.0)
    invariant = np.array_equal(a, b)
    norms = np.linalg.norm(a, axis=1)
    first = int(np.argmax(norms < 1e-3)) if (norms < 1e-3).any() else None
    oracle = np.array_equal(a, rprop_scalar(theta0, lambda t: 2.0 * t, 200))
    ok = invariant and oracle and first == RPROP_BOWL_STEPS and norms[-1] < 1e-3
    report(capsys, "RPROP bowl", ok,
           f"x10 scaling bit-identical: {invariant}; matches scalar oracle: {oracle}; "
           f"||theta|| < 1e-3 at step {first}, {norms[-1]:.1e} at step 200")


def test_dropout_consistency(capsys):
    rng = np.random.default_rng(5)
    spec = NetworkSpec((Dense(6, 32, "relu"), Dropout(0.5), Dense(32, 3, "linear")), (6,),
                       "mse")
    params = rng.normal(size=spec.n_params)
    x = rng.normal(size=6)
    expected, _ = nn.forward(spec, nn.scale_weights_for_inference(params, spec), x)
    outs, _ = nn.forward(spec, params, np.tile(x, (10000, 1)), mode="train", rng=rng)
    mean = outs.mean(axis=0)
    se = outs.std(axis=0, ddof=1) / np.sqrt(len(outs))
    z = np.abs(expected - mean) / se
    report(capsys, "dropout consistency", bool((z < 3).all()),
           f"|halved - mean| / SE per output: {', '.join(f'{v:.2f}' for v in z)}")
