"""Acceptance gate: one test per primary criterion, each at its stated tolerance.

Every test records a PASS/FAIL line; ``conftest.py`` prints them at the end
of the session.
"""

import csv
import json
import math
import time
from collections import Counter

import numpy as np
import pytest
from oracles import brute_force_cc, kink_aware_difference, relative_error
from scipy.stats import binomtest

from c3stability import model as M
from c3stability.c3score import C3Config, DistanceContext, c3_score, cc_score
from c3stability.cli import main
from c3stability.core import SPEEDS, TERRAINS, MarkerObservation, stack_frames
from c3stability.pipeline import (SplitSpec, balance_classes, gt_bin, prune_outliers,
                                  score_trial, stratified_split)
from c3stability.simgen import CampaignEntry, SimConfig, generate_campaign

RESULTS: list[tuple[str, bool, str]] = []


def record(name, ok, detail):
    RESULTS.append((name, bool(ok), detail))
    assert ok, f"{name}: {detail}"


def test_cc_oracle_equivalence():
    rng = np.random.default_rng(2024)
    # half continuous, half on an integer grid so exact radius ties occur
    cont = rng.uniform(0, 640, (5000, 4))
    grid = rng.integers(0, 60, (5000, 4)).astype(float)
    pairs = [((a, b), (c, d)) for a, b, c, d in np.vstack([cont, grid]).tolist()]
    cfg = C3Config()
    t0 = time.perf_counter()
    fast = [cc_score(p, q, cfg) for p, q in pairs]
    elapsed = time.perf_counter() - t0
    slow = [brute_force_cc(p, q) for p, q in pairs]
    mismatches = sum(f != s for f, s in zip(fast, slow))
    record("CC oracle equivalence", mismatches == 0 and elapsed < 1.0,
           f"{mismatches} mismatches over {len(pairs)} pairs, {elapsed:.3f} s")


def test_worked_composite():
    frames = [MarkerObservation(i / 60, u, v, True)
              for i, (u, v) in enumerate([(100, 100), (107, 100), (107, 150)])]
    full = c3_score(frames, [DistanceContext(10.0, 10.0)] * 3)
    half = c3_score(frames, [DistanceContext(5.0, 10.0)] * 3)
    record("worked composite", full == 23.0 and half == 11.5, f"C3 {full!r}, halved {half!r}")


def test_class_ordering():
    t0 = time.perf_counter()
    n_seeds = 30
    means = {}
    matrix = [CampaignEntry(t, v, 1) for t in TERRAINS for v in SPEEDS]
    for s in range(n_seeds):
        windows = []
        for run in generate_campaign(matrix, SimConfig(seed=1000 + s)):
            windows += score_trial(run)
        windows, _ = prune_outliers(windows)
        c3_max = max(w.c3_raw for w in windows)
        for t in TERRAINS:
            for v in SPEEDS:
                means[s, t, v] = np.mean([min(w.c3_raw / c3_max, 1.0) for w in windows
                                          if w.meta.class_key == (t, v)])
    pairs = ([((a, v), (b, v)) for v in SPEEDS for a, b in zip(TERRAINS, TERRAINS[1:])]
             + [((t, a), (t, b)) for t in TERRAINS for a, b in zip(SPEEDS, SPEEDS[1:])])
    worst_p, worst = 0.0, None
    for lo, hi in pairs:
        wins = sum(means[(s, *lo)] < means[(s, *hi)] for s in range(n_seeds))
        losses = sum(means[(s, *lo)] > means[(s, *hi)] for s in range(n_seeds))
        p = binomtest(wins, wins + losses, 0.5, alternative="greater").pvalue if wins + losses else 1.0
        if p >= worst_p:
            worst_p, worst = p, (lo, hi, wins, losses)
    elapsed = time.perf_counter() - t0
    record("class ordering of mean GT", worst_p < 0.05 and elapsed < 120,
           f"{len(pairs)} adjacent pairs over {n_seeds} seeds, worst sign-test p={worst_p:.2g} "
           f"({worst[0]} < {worst[1]}: {worst[2]}-{worst[3]}), {elapsed:.1f} s")


def test_gradient_check():
    arch = M.default_architecture()
    rng = np.random.default_rng(99)
    params = M.init_weights(arch, 99)
    for k in params:
        if k.endswith(".b"):
            params[k] = rng.normal(0, 0.1, params[k].shape)
    x = rng.normal(size=(2, 8, 200))
    y = rng.uniform(0, 1, 2)
    names = sorted(params)
    worst, checked, kinks = 0.0, 0, 0
    for training_mode in (False, True):
        _, cache = M._forward(params, arch, x, training_mode, np.random.default_rng(5))
        masks = {7: cache[7]} if training_mode else None
        _, grads = M.loss_and_grads(params, arch, x, y, training_mode, dropout_seed=5)
        done = 0
        # round-robin over tensors; redraw when the probe straddles a ReLU kink
        while done < 110:
            name = names[done % len(names)]
            k = int(rng.integers(params[name].size))
            num, crossed = kink_aware_difference(params, arch.layers, x, y, name, k, 1e-4, masks)
            if crossed:
                kinks += 1
                continue
            worst = max(worst, relative_error(grads[name].reshape(-1)[k], num))
            done += 1
        checked += done
    layers = sorted({l["type"] for l in arch.layers})
    record("gradient check", checked >= 200 and worst < 1e-4,
           f"{checked} parameters, layers {','.join(layers)}, max rel error {worst:.2e} "
           f"({kinks} probes straddling a ReLU kink redrawn)")


def test_learning_viability():
    from c3stability.pipeline import build_dataset
    from c3stability.simgen import DEFAULT_MATRIX

    t0 = time.perf_counter()
    ds = build_dataset(generate_campaign(DEFAULT_MATRIX, SimConfig(seed=0)),
                       holdout_terrain="grass")
    y_train = np.array([w.gt for w in ds.train])
    ckpt = M.train(stack_frames(ds.train), y_train, stack_frames(ds.validation),
                   np.array([w.gt for w in ds.validation]))
    y_test = np.array([w.gt for w in ds.test])
    pred = M.predict(ckpt, stack_frames(ds.test))
    elapsed = time.perf_counter() - t0
    test_mse = float(np.mean((pred - y_test) ** 2))
    baseline = float(np.mean((y_train.mean() - y_test) ** 2))
    n_frames = len(ds.train) + len(ds.validation) + len(ds.test)
    record("learning viability",
           test_mse <= 0.02 and baseline >= 2 * test_mse and elapsed < 600,
           f"{n_frames} dataframes, grass MSE {test_mse:.5f}, train-mean baseline "
           f"{baseline:.5f} ({baseline / test_mse:.1f}x), {elapsed:.0f} s")


@pytest.fixture(scope="module")
def labelled_pool(default_dataset):
    return default_dataset.train + default_dataset.validation


def test_split_fidelity(labelled_pool):
    spec_bins = SplitSpec().n_bins
    sizes = Counter(gt_bin(w.gt, spec_bins) for w in labelled_pool)
    big = sorted(b for b, n in sizes.items() if n >= 50)
    worst = 0.0
    for seed in range(10):
        _, val = stratified_split(labelled_pool, SplitSpec(split_seed=seed))
        got = Counter(gt_bin(w.gt, spec_bins) for w in val)
        for b in big:
            worst = max(worst, abs(got[b] / sizes[b] - 0.15))
    record("stratified split fidelity", bool(big) and worst <= 0.02,
           f"bins with >=50 members {big}, worst deviation {100 * worst:.2f} pp over 10 seeds")


def test_balance_invariant(small_campaign):
    from c3stability.simgen import DEFAULT_MATRIX

    pools = []
    for logs in (small_campaign, generate_campaign(DEFAULT_MATRIX, SimConfig(seed=0))):
        kept, _ = prune_outliers([w for run in logs for w in score_trial(run)])
        pools.append(kept)
    bad = []
    for i, pool in enumerate(pools):
        for seed in range(10):
            counts = Counter(w.meta.class_key for w in balance_classes(pool, seed))
            for t in {k[0] for k in counts}:
                levels = {n for k, n in counts.items() if k[0] == t}
                if len(levels) != 1:
                    bad.append((i, seed, t, levels))
    record("balance invariant", not bad,
           f"{len(pools) * 10} balanced draws, {len(bad)} terrains with unequal speed counts")


@pytest.fixture(scope="module")
def two_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    cfg = root / "run_config.json"
    cfg.write_text(json.dumps({"sim": {"seed": 0}}))
    codes = [main(["run", "--config", str(cfg), "--out", str(root / name)]) for name in "ab"]
    assert codes == [0, 0]
    return root / "a", root / "b"


def test_end_to_end_determinism(two_runs):
    a, b = two_runs
    names = sorted(str(p.relative_to(a)) for p in a.rglob("*") if p.is_file()
                   and p.parts[len(a.parts)] in ("dataset", "model.zip", "report"))
    differ = [n for n in names if (a / n).read_bytes() != (b / n).read_bytes()]
    record("end-to-end determinism", names and not differ,
           f"{len(names)} dataset/checkpoint/report files compared, {len(differ)} differ")


def test_error_distribution_self_consistency(two_runs):
    report_dir = two_runs[0] / "report"
    doc = json.loads((report_dir / "report.json").read_text())
    with open(report_dir / "errors.csv", newline="") as fh:
        errors = [float(r["error"]) for r in csv.DictReader(fh)]
    mse = math.fsum(e * e for e in errors) / len(errors)
    bias = math.fsum(errors) / len(errors)
    d_mse, d_bias = abs(mse - doc["mse"]), abs(bias - doc["bias"])
    record("error-distribution self-consistency", d_mse <= 1e-12 and d_bias <= 1e-12,
           f"n={len(errors)}, |dMSE|={d_mse:.1e}, |dbias|={d_bias:.1e} "
           f"(MSE {doc['mse']:.5f}, bias {doc['bias']:+.5f})")
