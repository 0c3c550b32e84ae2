"""Acceptance criteria, one PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -v``; the lines are repeated in
an "acceptance criteria" section at the end of the pytest report. Running
this file directly (``python3 -m tests.test_acceptance``) prints the lines
without pytest.
"""

import itertools
import math
import os
import statistics
import time
from decimal import ROUND_HALF_UP, Decimal

import numpy as np
import pytest

from ttsprune import toy
from ttsprune.params import ParamStore
from ttsprune.pitch import silence, sine, square, yin_f0
from ttsprune.pruner import apply_mask, sparsity, ump
from ttsprune.schedules import ScheduleConfig, run_imp, run_parp, run_parp_p
from ttsprune.stats import ABOutcome, exact_mwu_p, mann_whitney_u, pairwise_z
from ttsprune.sweep import SweepConfig, read_results, run_sweep
from ttsprune.wer import edit_distance

from .conftest import trained_baseline
from .oracles import brute_edit_distance, finite_difference_grad

RESULTS = []

GRID_1 = [round(0.1 * i, 1) for i in range(10)] + [0.95, 0.99]
PARALLELISM = max(1, min(4, os.cpu_count() or 1))


def report(cid, ok, detail):
    line = f"criterion {cid:>3}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    RESULTS.append(line)
    assert ok, line


def random_store(rng):
    n = int(rng.integers(2, 6))
    entries = {f"layer{i}.weight": rng.standard_normal(tuple(rng.integers(1, 60, size=2))) for i in range(n)}
    entries.update({f"layer{i}.bias": rng.standard_normal(3) for i in range(n)})
    return ParamStore(entries, {f"layer{i}.weight" for i in range(n)})


def test_c01_sparsity_exactness():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    bad = []
    for _ in range(20):
        store = random_store(rng)
        d = store.num_prunable
        for s in GRID_1:
            got = sparsity(ump(store, s))
            # independent oracle: decimal arithmetic, half-up
            k = int((Decimal(repr(s)) * d).to_integral_value(rounding=ROUND_HALF_UP))
            if got != k / d:
                bad.append((d, s, got))
    dt = time.perf_counter() - t0
    report("1", not bad and dt < 10, f"20 stores x {len(GRID_1)} sparsities, {len(bad)} mismatches, {dt:.2f}s (< 10s)")


def test_c02_nestedness_and_idempotence():
    rng = np.random.default_rng(102)
    nest_fail = idem_fail = idem_checked = 0
    for _ in range(100):
        store = random_store(rng)
        s1, s2 = sorted(rng.uniform(0, 0.99, 2))
        z1, z2 = ~ump(store, s1).vector(), ~ump(store, s2).vector()
        nest_fail += bool((z1 & ~z2).any())
        m = ump(store, s2)
        pruned = apply_mask(store, m)
        survivors = np.concatenate([pruned[n][m[n]] for n in m.names()])
        if np.all(survivors != 0):
            idem_checked += 1
            idem_fail += not ump(pruned, s2).equals(m)
    ok = nest_fail == 0 and idem_fail == 0 and idem_checked == 100
    report("2", ok, f"100 trials: nestedness failures {nest_fail}, idempotence failures {idem_fail}/{idem_checked}")


def test_c03_imp_zero_preservation():
    _, model, ds, _ = trained_baseline(0)
    res = run_imp(model, ds, ScheduleConfig(kind="IMP", target_sparsity=0.5, steps=2000, seed=0))
    worst = max(v for _, v in res.masked_max)
    ok = len(res.masked_max) == 2000 and worst == 0.0
    report("3", ok, f"IMP at 0.5, {len(res.masked_max)} steps checked, max |masked weight| = {worst}")


def test_c04_parp_degeneracy():
    _, model, ds, _ = trained_baseline(0)
    base = dict(target_sparsity=0.7, steps=300, seed=0, n_updates=40)
    frozen = run_parp(model, ds, ScheduleConfig(lr=0.0, **base))
    lr0 = frozen.final_mask.equals(frozen.initial_mask) and frozen.mask_overlap_m0_mD == 1.0
    parp = run_parp(model, ds, ScheduleConfig(**base))
    parp_p = run_parp_p(model, ds, ScheduleConfig(kind="PARP_P", parp_p_start=0.7, **base))
    same = (
        parp.loss_curve == parp_p.loss_curve
        and parp.final_weights.equals(parp_p.final_weights)
        and parp.final_mask.equals(parp_p.final_mask)
    )
    report("4", lr0 and same, f"lr=0: m_D == m_0 {lr0} (overlap {frozen.mask_overlap_m0_mD}); PARP-P start==target bit-identical {same}")


def test_c05_gradient_correctness():
    t0 = time.perf_counter()
    m = toy.init_model(4, 5, 3, 2, seed=0)
    rng = np.random.default_rng(5)
    params = {n: a.astype(np.float64) + (0.1 * rng.standard_normal(a.shape) if "bias" in n else 0.0) for n, a in m.params.entries.items()}
    ds = toy.gen_dataset(0, 4, 4, 3, (1, 4), 2)
    batch = toy.make_batch(ds.inputs, ds.targets, 2, 3)
    _, analytic = toy.loss_and_grad(params, batch, 2, 3)
    numeric = finite_difference_grad(lambda p: toy.loss_and_grad(p, batch, 2, 3, need_grad=False)[0], params, h=1e-3)
    worst = 0.0
    for n in analytic:
        scale = np.maximum(np.maximum(np.abs(analytic[n]), np.abs(numeric[n])), 1e-7)
        worst = max(worst, float(np.max(np.abs(analytic[n] - numeric[n]) / scale)))
    dt = time.perf_counter() - t0
    report("5", worst < 1e-4 and dt < 30, f"tiny model, {len(analytic)} tensors, worst relative error {worst:.2e} (< 1e-4), {dt:.2f}s (< 30s)")


@pytest.fixture(scope="module")
def default_sweep(tmp_path_factory):
    out = tmp_path_factory.mktemp("default_sweep")
    t0 = time.perf_counter()
    run_sweep(SweepConfig(parallelism=PARALLELISM, save_artifacts=False), out)
    elapsed = time.perf_counter() - t0
    return read_results(out / "results.csv"), read_results(out / "baselines.csv"), elapsed


def test_c06a_dense_baseline(default_sweep):
    _, baselines, _ = default_sweep
    ratios = [float(b["final_loss"]) / float(b["initial_loss"]) for b in baselines]
    report("6a", len(ratios) == 3 and max(ratios) < 0.01, "final/initial loss per seed " + ", ".join(f"{r:.4f}" for r in ratios) + " (< 0.01)")


def test_c06b_parp_half_sparsity(default_sweep):
    rows, baselines, _ = default_sweep
    dense = {b["seed"]: float(b["final_loss"]) for b in baselines}
    ratios = [
        float(r["final_loss"]) / dense[r["seed"]]
        for r in rows
        if r["schedule"] == "PARP" and float(r["sparsity"]) == 0.5 and r["status"] == "ok"
    ]
    report("6b", len(ratios) == 3 and max(ratios) <= 1.1, "PARP@0.5 / dense loss per seed " + ", ".join(f"{r:.3f}" for r in ratios) + " (<= 1.1)")


def test_c06c_high_sparsity_wer(default_sweep):
    rows, _, elapsed = default_sweep
    wer = {(r["schedule"], float(r["sparsity"]), r["seed"]): float(r["toy_wer"]) for r in rows if r["status"] == "ok"}
    checks = []
    for kind in ("IMP", "PARP", "PARP_P"):
        for seed in ("0", "1", "2"):
            lo, hi = wer.get((kind, 0.5, seed)), wer.get((kind, 0.99, seed))
            checks.append(lo is not None and hi is not None and hi > lo)
    failed = sum(r["status"] != "ok" for r in rows)
    mean = {k: (np.mean([wer[(k, 0.5, s)] for s in "012"]), np.mean([wer[(k, 0.99, s)] for s in "012"])) for k in ("IMP", "PARP", "PARP_P")}
    detail = "; ".join(f"{k} WER {a:.3f} -> {b:.3f}" for k, (a, b) in mean.items())
    ok = all(checks) and failed == 0 and elapsed < 600
    report("6c", ok, f"{detail}; {len(rows)} runs, {failed} failed, sweep {elapsed:.0f}s (< 600s)")


@pytest.fixture(scope="module")
def paired_sweep(tmp_path_factory):
    cfg = SweepConfig(grid=[0.95], kinds=["PARP", "PARP_P"], seeds=[0, 1, 2, 3, 4], save_artifacts=False)
    a = tmp_path_factory.mktemp("paired_serial")
    run_sweep(cfg, a)
    cfg.parallelism = 3
    b = tmp_path_factory.mktemp("paired_parallel")
    run_sweep(cfg, b)
    return a / "results.csv", b / "results.csv"


def test_c07_parp_p_vs_parp(paired_sweep):
    rows = read_results(paired_sweep[0])
    loss = {(r["schedule"], r["seed"]): float(r["final_loss"]) for r in rows if r["status"] == "ok"}
    parp = [loss[("PARP", s)] for s in "01234"]
    parp_p = [loss[("PARP_P", s)] for s in "01234"]
    mp, mpp = statistics.median(parp), statistics.median(parp_p)
    wins = sum(b <= a for a, b in zip(parp, parp_p))
    report("7", mpp <= mp, f"at 0.95 over 5 seeds: median PARP-P {mpp:.4f} vs PARP {mp:.4f}; PARP-P <= PARP on {wins}/5 seeds")


def test_c08_yin_accuracy():
    t0 = time.perf_counter()
    errs = {}
    for f in (110, 220, 440, 880):
        track = yin_f0(sine(f))
        errs[f] = abs(np.median(track.f0) / f - 1) if track.voiced.all() else math.inf
    sq = yin_f0(square(220))
    sq_err = abs(np.median(sq.f0) / 220 - 1) if sq.voiced.all() else math.inf
    quiet = not yin_f0(silence()).voiced.any()
    dt = time.perf_counter() - t0
    ok = max(errs.values()) <= 0.01 and sq_err <= 0.02 and quiet and dt < 5
    detail = ", ".join(f"{f}Hz {e:.3%}" for f, e in errs.items())
    report("8", ok, f"sines {detail} (<= 1%); square 220Hz {sq_err:.3%} (<= 2%); silence unvoiced {quiet}; {dt:.2f}s (< 5s)")


def test_c09_wer_oracle():
    rng = np.random.default_rng(109)
    mismatches = 0
    for _ in range(1000):
        a = rng.integers(0, 3, rng.integers(0, 7)).tolist()
        b = rng.integers(0, 3, rng.integers(0, 7)).tolist()
        mismatches += edit_distance(a, b) != brute_edit_distance(a, b)
    report("9", mismatches == 0, f"1000 random pairs, length <= 6: {mismatches} disagreements with exhaustive search")


def test_c10a_normal_vs_exact():
    rng = np.random.default_rng(110)
    worst, worst_case, tested = 0.0, None, 0
    for n1, n2 in itertools.product(range(1, 7), repeat=2):
        for _ in range(20):
            x = rng.integers(1, 6, n1).tolist()
            y = rng.integers(1, 6, n2).tolist()
            delta = abs(mann_whitney_u(x, y).p_two_sided - exact_mwu_p(x, y))
            tested += 1
            if delta > worst:
                worst, worst_case = delta, (x, y)
    report("10a", worst <= 0.05, f"{tested} random MOS samples with n1,n2 <= 6: worst |dp| = {worst:.3f} at {worst_case} (<= 0.05)")


def test_c10b_exact_example():
    p = exact_mwu_p([1, 2, 3], [4, 5, 6])
    report("10b", abs(p - 0.1) < 1e-12, f"exact p([1,2,3] vs [4,5,6]) = {p}")


def test_c10c_z_boundary():
    res = {w: pairwise_z(ABOutcome(w, 200)) for w in (114, 112, 110)}
    ok = res[114].significant and res[112].significant and not res[110].significant
    detail = ", ".join(f"{w / 2:.0f}% p={r.p:.4f} {'sig' if r.significant else 'n.s.'}" for w, r in res.items())
    report("10c", ok, f"n=200: {detail}")


def test_c11_determinism(paired_sweep):
    a, b = (p.read_bytes() for p in paired_sweep)
    report("11", a == b and len(a) > 0, f"parallelism 1 vs 3 results.csv byte-identical: {a == b} ({len(a)} bytes)")


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
