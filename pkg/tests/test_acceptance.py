"""End-to-end acceptance checks.

Each test prints a single PASS/FAIL line for its criterion (visible with
``pytest -s``). The A/B study fixture preserves its run artifacts in the
pytest tmp directory so a failed ordering can be investigated offline.
"""

import os
import time

import numpy as np
import pytest

from hkdistill.config import DatasetConfig, OuterOptConfig, RunConfig
from hkdistill.data import split_meta, synth_gaussians
from hkdistill.ensemble import EnsembleConfig, WeightPair, WeightStore, ensemble
from hkdistill.metaloop import InnerLoopConfig
from hkdistill.models import load_checkpoint
from hkdistill.trainer import distill, export_curves, train_teacher
from hkdistill.verify import (
    FIRST_ORDER_TOL,
    SECOND_ORDER_TOL,
    check_double_backward,
    check_full_loss_gradient,
    check_hypergradient,
    check_op_gradients,
)

SEEDS = range(5)

# --- A/B study configuration (10 Gaussian classes, dim 32) -----------------
AB_SEPARATION = 3.0
AB_DATA_SEED = 3
AB_META_LR = 1e-3
AB_DATA = DatasetConfig(classes=10, dim=32, train_per_class=500,
                        eval_per_class=100, meta_per_class=10,
                        separation=AB_SEPARATION, data_seed=AB_DATA_SEED)
AB_TEACHER_EPOCHS = 30
AB_EPOCHS = 60


def _report(criterion: int, name: str, ok: bool) -> bool:
    print(f"\ncriterion {criterion} ({name}): {'PASS' if ok else 'FAIL'}")
    return ok


def test_criterion_1_gradient_oracles():
    start = time.time()
    worst_first = 0.0
    worst_second = 0.0
    for seed in SEEDS:
        worst_first = max(worst_first, *check_op_gradients(seed).values())
        worst_first = max(worst_first, check_full_loss_gradient(seed))
        worst_second = max(worst_second, check_double_backward(seed))
    elapsed = time.time() - start
    ok = worst_first < FIRST_ORDER_TOL and worst_second < SECOND_ORDER_TOL and elapsed < 60
    assert _report(1, "gradient oracle suite", ok), (
        f"first-order {worst_first:.2e} (tol {FIRST_ORDER_TOL}), "
        f"second-order {worst_second:.2e} (tol {SECOND_ORDER_TOL}), {elapsed:.1f}s"
    )


def test_criterion_2_hypergradient_oracle():
    start = time.time()
    worst = max(check_hypergradient(seed) for seed in SEEDS)
    elapsed = time.time() - start
    ok = worst < 1e-4 and elapsed < 120
    assert _report(2, "hypergradient oracle", ok), f"rel err {worst:.2e}, {elapsed:.1f}s"


def test_criterion_3_reduction_to_static(tmp_path):
    # small task sized so 60 epochs give well over 200 iterations
    data = DatasetConfig(classes=3, dim=4, train_per_class=40, eval_per_class=10,
                         meta_per_class=3, separation=3.0, data_seed=0)
    # 111 train samples / batch 16 = 7 iterations per epoch, 30 epochs = 210
    common = dict(seed=0, epochs=30, batch_size=16, data=data,
                  teacher_hidden=(16,), student_hidden=(8,), metanet_hidden=8,
                  search_range=0.0,  # weight range collapsed to exactly 1
                  inner=InnerLoopConfig(interval=10, meta_lr=1e-3),
                  outer=OuterOptConfig(lr=0.05))
    ckpt = train_teacher(RunConfig(mode="static", out_dir=str(tmp_path / "t"),
                                   epochs=5, batch_size=16, data=data,
                                   teacher_hidden=(16,), outer=OuterOptConfig(lr=0.05)))
    runs = {}
    for mode in ("static", "hkd"):
        out = tmp_path / mode
        distill(RunConfig(mode=mode, out_dir=str(out), **common), ckpt)
        runs[mode] = out

    # final parameters bitwise identical
    a = load_checkpoint(runs["static"] / "checkpoint_last.txt")
    b = load_checkpoint(runs["hkd"] / "checkpoint_last.txt")
    params_equal = all(
        np.array_equal(a[g][n], b[g][n])
        for g in ("student", "projector") for n in a[g]
    )
    # per-iteration loss trajectory identical (columns ce..gamma_mean)
    rows_a = (runs["static"] / "metrics.csv").read_text().splitlines()[1:]
    rows_b = (runs["hkd"] / "metrics.csv").read_text().splitlines()[1:]
    trajectory_equal = len(rows_a) >= 200 and all(
        ra.split(",")[:8] == rb.split(",")[:8] for ra, rb in zip(rows_a, rows_b)
    )
    ok = params_equal and trajectory_equal
    assert _report(3, "hkd with zero range reduces to static, bitwise", ok), (
        f"params_equal={params_equal} trajectory_equal={trajectory_equal} "
        f"iterations={len(rows_a)}"
    )


def test_criterion_4_ensemble_formula_exactness():
    rng = np.random.default_rng(0)
    l = 0.5
    failures = 0
    for _ in range(1000):
        prev = WeightPair(rng.uniform(1 - l, 1 + l), rng.uniform(1 - l, 1 + l))
        fresh = WeightPair(rng.uniform(1 - l, 1 + l), rng.uniform(1 - l, 1 + l))
        u = rng.uniform(0, 1)
        eps = rng.uniform(0, 1)
        u_th = 0.6
        have_prev = rng.random() < 0.8
        cfg = EnsembleConfig(epsilon=eps, uncertainty_threshold=u_th)
        store = WeightStore()
        if have_prev:
            store.put(0, prev, 1)
        out = ensemble(store, 0, fresh, u, 2, cfg)
        if u < u_th and have_prev:
            expect = (eps * prev.beta + (1 - eps) * fresh.beta,
                      eps * prev.gamma + (1 - eps) * fresh.gamma)
        else:
            expect = (fresh.beta, fresh.gamma)
        if abs(out.beta - expect[0]) > 1e-15 or abs(out.gamma - expect[1]) > 1e-15:
            failures += 1
        if not (1 - l <= out.beta <= 1 + l and 1 - l <= out.gamma <= 1 + l):
            failures += 1
    ok = failures == 0
    assert _report(4, "weight ensembling formula exact to 1e-15", ok), f"{failures} mismatches"


def _ab_config(mode, seed, out_dir):
    return RunConfig(
        mode=mode, seed=seed, epochs=AB_EPOCHS, batch_size=64, out_dir=str(out_dir),
        data=AB_DATA, teacher_hidden=(256, 256), student_hidden=(32,),
        search_range=0.5,
        ensemble=EnsembleConfig(epsilon=0.5, uncertainty_threshold=0.6,
                                normalize_entropy=True),
        inner=InnerLoopConfig(interval=100, meta_lr=AB_META_LR),
        outer=OuterOptConfig(lr=0.05, momentum=0.9, weight_decay=5e-4),
    )


@pytest.fixture(scope="module")
def ab_study(tmp_path_factory):
    """Teacher + the three-mode comparison over 5 seeds; artifacts preserved."""
    root = tmp_path_factory.mktemp("ab_study")
    acc = {m: [] for m in ("static", "mwn", "hkd")}
    for seed in SEEDS:
        t_cfg = RunConfig(mode="static", seed=seed, epochs=AB_TEACHER_EPOCHS,
                          batch_size=64, out_dir=str(root / f"teacher_s{seed}"),
                          data=AB_DATA, teacher_hidden=(256, 256),
                          outer=OuterOptConfig(lr=0.05, momentum=0.9, weight_decay=5e-4))
        ckpt = train_teacher(t_cfg)
        for mode in acc:
            out = root / f"{mode}_s{seed}"
            acc[mode].append(distill(_ab_config(mode, seed, out), ckpt))
    print(f"\nA/B study artifacts preserved under {root}")
    return root, acc


def test_criterion_5_ab_ordering(ab_study):
    root, acc = ab_study
    means = {m: float(np.mean(v)) for m, v in acc.items()}
    ok = means["hkd"] >= means["mwn"] >= means["static"]
    line = ", ".join(f"{m} {means[m]:.4f}" for m in ("static", "mwn", "hkd"))
    assert _report(5, "A/B mean eval accuracy ordering hkd >= mwn >= static", ok), (
        f"{line}; per-seed {acc}; artifacts in {root}"
    )


def test_criterion_6_weight_curves(ab_study):
    root, _ = ab_study
    worst_std = np.inf
    in_range = True
    for seed in SEEDS:
        run_dir = root / f"hkd_s{seed}"
        _, epoch_path = export_curves(str(run_dir))
        rows = [r.split(",") for r in open(epoch_path).read().splitlines()[1:]]
        beta = np.array([float(r[1]) for r in rows])
        gamma = np.array([float(r[3]) for r in rows])
        worst_std = min(worst_std, beta.std(), gamma.std())
        # every per-iteration batch-mean weight within the configured range
        it_rows = [r.split(",") for r in
                   (run_dir / "weights.csv").read_text().splitlines()[1:]]
        for r in it_rows:
            if not (0.5 <= float(r[2]) <= 1.5 and 0.5 <= float(r[4]) <= 1.5):
                in_range = False
    ok = worst_std > 1e-3 and in_range
    assert _report(6, "weight curves non-constant and in range", ok), (
        f"min epochwise std {worst_std:.2e}, in_range={in_range}"
    )


def test_criterion_7_determinism(ab_study, tmp_path):
    root, _ = ab_study
    ckpt = str(root / "teacher_s0" / "teacher_checkpoint.txt")
    rerun = tmp_path / "hkd_s0_rerun"
    distill(_ab_config("hkd", 0, rerun), ckpt)
    original = root / "hkd_s0"
    ok = all(
        (original / name).read_bytes() == (rerun / name).read_bytes()
        for name in ("metrics.csv", "weights.csv",
                     "checkpoint_last.txt", "checkpoint_best.txt")
    )
    assert _report(7, "byte-identical rerun", ok)


def test_criterion_8_meta_split_invariants():
    ds = synth_gaussians(class_count=100, dim=8, samples_per_class=20,
                         separation=3.0, seed=0)
    train, meta = split_meta(ds, per_class_count=10, seed=0)
    counts = np.bincount(meta.labels, minlength=100)
    ok = (
        len(meta) == 1000
        and (counts == 10).all()
        and not set(train.ids.tolist()) & set(meta.ids.tolist())
        and len(train) + len(meta) == len(ds)
    )
    assert _report(8, "meta split stratified and disjoint", ok), (
        f"meta size {len(meta)}, counts {counts.min()}..{counts.max()}"
    )
