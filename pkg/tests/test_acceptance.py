"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import itertools
import subprocess
import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from ssdas import alignment as al
from ssdas import gradcheck, jigsaw, optim, synthdata, trainer
from ssdas import numerics as nx
from ssdas.config import ExperimentConfig, acda_image_only, s_plus_t

SEEDS = (0, 1, 2, 3, 4)
RUN_BUDGET_S = 120.0
ORDERING_BUDGET_S = 30 * 60.0


# --- 1. jigsaw round trip ----------------------------------------------------------------
def test_c01_jigsaw_round_trip(report):
    rng = np.random.default_rng(0)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        n = int(rng.integers(1, 5))
        cell = int(rng.integers(1, 5))
        m = rng.standard_normal((int(rng.integers(1, 5)), n * cell, n * cell))
        perm = rng.permutation(n * n)
        bad += not np.array_equal(jigsaw.restore(jigsaw.shuffle(m, perm), perm), m)
    dt = time.perf_counter() - t0
    ok = bad == 0 and dt < 5.0
    assert report(1, ok, f"{1000 - bad}/1000 bit-exact in {dt:.2f}s (limit 5s)")


# --- 2. permutation sets -----------------------------------------------------------------
def test_c02_permutation_sets(report):
    four = jigsaw.build_permutation_set(2, 24).perms
    exhaustive = sorted(map(tuple, four.tolist())) == sorted(itertools.permutations(range(4)))
    distinct = []
    for seed in range(5):
        perms = jigsaw.build_permutation_set(3, 100, seed=seed).perms
        rows = {tuple(p) for p in perms.tolist()}
        valid = all(sorted(p) == list(range(9)) for p in rows)
        distinct.append(len(rows) == 100 and perms.shape == (100, 9) and valid)
    ok = exhaustive and all(distinct)
    assert report(2, ok, f"n=2,N=24 exhaustive={exhaustive}; n=3,N=100 distinct for seeds 0-4: {distinct}")


# --- 3. gradient suite -------------------------------------------------------------------
def test_c03_gradient_suite(report):
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=0, points=100)
    dt = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_err)
    ok = all(r.passed for r in results) and dt < 60.0
    print(gradcheck.format_report(results))
    assert report(3, ok, f"{sum(r.passed for r in results)}/{len(results)} checks, worst {worst.name} "
                         f"{worst.max_rel_err:.2e} (limit 1e-4) in {dt:.1f}s (limit 60s)")


# --- 4. mask oracles ---------------------------------------------------------------------
def rm_oracle(cds, epoch, max_epoch):
    b = len(cds)
    n_idx = min(b * epoch // max_epoch, b - 1)
    keyed = sorted(range(b), key=lambda i: (cds[i], i))
    thres = cds[keyed[n_idx]]
    return np.array([1.0 if c >= thres else 0.0 for c in cds])


def add_oracle(ent, epoch, max_epoch):
    b = len(ent)
    n_idx = min(b * epoch // max_epoch, b - 1)
    arr = np.asarray(ent)
    for cand in ent:
        if (arr < cand).sum() <= n_idx < (arr <= cand).sum():
            return (arr <= cand).astype(np.float64)
    raise AssertionError("no threshold candidate")


def random_vector(rng):
    b = int(rng.integers(1, 65))
    kind = rng.integers(4)
    if kind == 0:
        return np.full(b, rng.random())
    if kind == 1:
        return rng.integers(0, 4, b) / 4.0
    return rng.random(b)


def test_c04_mask_oracles(report):
    rng = np.random.default_rng(0)
    cases = [np.array([0.3]), np.full(7, 0.5), np.zeros(64)]
    cases += [random_vector(rng) for _ in range(10000 - len(cases))]
    mismatches = 0
    for v in cases:
        max_epoch = int(rng.integers(1, 41))
        epoch = int(rng.integers(0, max_epoch + 1))
        prog = al.EpochProgress(epoch, max_epoch)
        mismatches += not np.array_equal(al.compute_m_rm(v, prog), rm_oracle(list(v), epoch, max_epoch))
        mismatches += not np.array_equal(al.compute_m_add(v, prog), add_oracle(list(v), epoch, max_epoch))
    assert report(4, mismatches == 0, f"{len(cases)} vectors x 2 masks, {mismatches} mismatches")


# --- 5. curriculum laws ------------------------------------------------------------------
def test_c05_curriculum_laws(report):
    rng = np.random.default_rng(1)
    ok = True
    for _ in range(200):
        b = int(rng.integers(1, 65))
        v = rng.permutation(b * 3)[:b] / (3.0 * b)
        max_epoch = int(rng.integers(1, 41))
        zeros, ones = [], []
        for e in range(max_epoch + 1):
            prog = al.EpochProgress(e, max_epoch)
            zeros.append(int((al.compute_m_rm(v, prog) == 0).sum()))
            ones.append(int(al.compute_m_add(v, prog).sum()))
            ok &= zeros[-1] == min(b * e // max_epoch, b - 1)
        ok &= zeros == sorted(zeros) and ones == sorted(ones)
    assert report(5, bool(ok), "200 distinct-valued vectors: removal count closed form and monotone masks")


# --- shared benchmark runs ---------------------------------------------------------------
class Runs:
    """Cache of (variant, seed, k) -> (metrics, rows, seconds) on the default benchmark."""

    def __init__(self):
        self.cache = {}
        self.data = {}

    def data_for(self, seed, k):
        if (seed, k) not in self.data:
            self.data[seed, k] = trainer.TrainData.from_split(synthdata.build_benchmark(k=k, seed=seed))
        return self.data[seed, k]

    def get(self, variant, seed, k=1):
        key = (variant, seed, k)
        if key not in self.cache:
            base = ExperimentConfig(seed=seed, k=k)
            data = self.data_for(seed, k)
            t0 = time.perf_counter()
            if variant == "st":
                res = trainer.train_s_plus_t(s_plus_t(base), data)
            elif variant == "acda":
                res = trainer.train(acda_image_only(base), data)
            else:
                res = trainer.train(base, data)
            self.cache[key] = (res.metrics, res.rows, time.perf_counter() - t0)
        return self.cache[key]


@pytest.fixture(scope="session")
def runs():
    return Runs()


# --- 6. gradient scope -------------------------------------------------------------------
def test_c06_scope_law(report, runs):
    cfg = ExperimentConfig(max_epoch=1, epochs_pre=0)
    res = trainer.train(cfg, runs.data_for(0, 1), audit_scope=True)
    audit = res.state.scope_audit
    worst = max(audit) if audit else None
    ok = bool(audit) and all(v == 0.0 for v in audit)
    assert report(6, ok, f"{len(audit)} term-B batches over a full epoch, max |grad J_s| = {worst}")


# --- 7. schedule -------------------------------------------------------------------------
def test_c07_schedule(report):
    start = optim.poly_lr(2.5e-4, 0, 1000, 0.9) == 2.5e-4
    end = optim.poly_lr(2.5e-4, 1000, 1000, 0.9) == 0.0
    lrs = [optim.poly_lr(2.5e-4, i, 1000, 0.9) for i in range(1001)]
    monotone = all(a >= b for a, b in zip(lrs, lrs[1:]))
    p = nx.Tensor(np.array([1.0]), requires_grad=True)
    opt = optim.OptimizerState(0.9, 1e-4)
    for _ in range(2):
        optim.sgd_step(opt, [p], [np.array([0.5])], 0.1)
    # v1 = 0.5 + 1e-4, p1 = 0.94999; v2 = 0.9 v1 + 0.5 + 1e-4 p1, p2 = p1 - 0.1 v2
    momentum = abs(p.data[0] - 0.8549715001) < 1e-12
    ok = start and end and monotone and momentum
    assert report(7, ok, f"start={start} end={end} monotone={monotone} two-step momentum={momentum}")


# --- 8. ablation ordering ----------------------------------------------------------------
def test_c08_ablation_ordering(report, runs):
    t0 = time.perf_counter()
    table = {v: [runs.get(v, s) for s in SEEDS] for v in ("st", "acda", "full")}
    dt = time.perf_counter() - t0
    mean = {v: float(np.mean([m["miou"] for m, _, _ in rs])) for v, rs in table.items()}
    slowest = max(sec for rs in table.values() for _, _, sec in rs)
    gap = 100 * (mean["full"] - mean["st"])
    ok = mean["full"] >= mean["acda"] >= mean["st"] and gap >= 5.0
    ok = ok and slowest < RUN_BUDGET_S and dt < ORDERING_BUDGET_S
    for v, rs in table.items():
        print(v, [round(m["miou"], 4) for m, _, _ in rs])
    assert report(8, ok, f"mean mIoU S+T {mean['st']:.4f}, ACDA-image {mean['acda']:.4f}, full {mean['full']:.4f}; "
                         f"gap {gap:.2f} points (need >= 5); slowest run {slowest:.0f}s, total {dt:.0f}s")


# --- 9. shot count -----------------------------------------------------------------------
def test_c09_shot_monotonicity(report, runs):
    ks = (1, 3, 10)
    mean = [float(np.mean([runs.get("full", s, k)[0]["miou"] for s in SEEDS])) for k in ks]
    ok = all(a <= b for a, b in zip(mean, mean[1:]))
    assert report(9, ok, "full mean mIoU " + ", ".join(f"k={k}: {m:.4f}" for k, m in zip(ks, mean)))


# --- 10. feature statistics --------------------------------------------------------------
def test_c10_feature_statistics(report, runs):
    stats = {v: np.array([[runs.get(v, s)[0]["sigma_w2"], runs.get(v, s)[0]["sigma_b2"]] for s in SEEDS])
             for v in ("st", "full")}
    st_w, st_b = stats["st"].mean(axis=0)
    fu_w, fu_b = stats["full"].mean(axis=0)
    ok = fu_w < st_w and fu_b > st_b
    assert report(10, bool(ok), f"sigma_w2 S+T {st_w:.4f} vs full {fu_w:.4f} (need lower); "
                                f"sigma_b2 S+T {st_b:.4f} vs full {fu_b:.4f} (need higher)")


# --- 11. determinism ---------------------------------------------------------------------
def test_c11_determinism(report, tmp_path):
    cfg = ExperimentConfig(max_epoch=2, epochs_pre=1).dump(tmp_path / "cfg.json")
    for name in ("a", "b"):
        subprocess.run([sys.executable, "-m", "ssdas", "train", "--config", str(cfg), "--seed", "3",
                        "--out", str(tmp_path / name)], check=True, capture_output=True)
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("metrics.json", "checkpoint.bin")}
    assert report(11, all(same.values()), f"byte-identical across two processes: {same}")


# --- 12. reduction to S+T ----------------------------------------------------------------
def test_c12_reduction(report, runs):
    off = replace(ExperimentConfig(seed=0), acda_image=False, pida_image=False, acda_region=False, pida_region=False)
    a = trainer.train(off, runs.data_for(0, 1))
    b = trainer.train_s_plus_t(s_plus_t(ExperimentConfig(seed=0)), runs.data_for(0, 1))
    col_a, col_b = [r["loss_sup"] for r in a.rows], [r["loss_sup"] for r in b.rows]
    ok = col_a == col_b and len(col_a) > 0
    assert report(12, ok, f"{len(col_a)} epochs, supervised-loss columns identical: {col_a == col_b}")
