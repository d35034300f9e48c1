"""Acceptance gate: ten criteria, each reported as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s`` (or plain ``pytest``; the
lines are repeated in the terminal summary).
"""

import itertools
import math
import time

import numpy as np
import pytest

from diversify.analysis import accuracy, best_threshold_error, proxy_h_divergence
from diversify.bench import recovery_run, run_bench, summarize
from diversify.config import ExperimentConfig
from diversify.dataio import SynthConfig, generate_synthetic, load_dataset, save_dataset, split_train_val
from diversify.model import ArchConfig, build_model, load_checkpoint, save_checkpoint
from diversify.numerics import (
    BatchNorm2d,
    Conv2d,
    Linear,
    MaxPool,
    Tensor,
    cross_entropy,
    finite_difference_check,
    relu,
)
from diversify.pseudolabel import (
    assignment_cost,
    domain_class_label,
    nearest_centroid_assign,
    refine_pseudo_labels,
    soft_centroids,
    split_domain_class,
)
from diversify.training import Trainer, TrainConfig, history_to_csv, train, train_erm

RESULTS: dict[int, tuple[bool, str]] = {}


def report(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = (ok, detail)
    print(f"\nACCEPTANCE criterion {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


# ----------------------------------------------------------------------
# 1. gradient correctness
# ----------------------------------------------------------------------

GRAD_SEEDS = range(20)
GRAD_TOL = 1e-4
ARCH64 = ArchConfig(channels=2, window=24, kernel_width=3, conv_channels=(3, 4), bottleneck_dim=6,
                    adv_hidden=(5, 5), dtype="float64")


def layer_checks(seed: int) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    out = {}

    lin = Linear(5, 4, rng)
    x = Tensor(rng.normal(size=(6, 5)), requires_grad=True)
    r = rng.normal(size=(6, 4))
    out["linear"] = finite_difference_check(lambda: (lin(x) * r).sum(), [x, *lin.parameters()])

    conv = Conv2d(2, 3, 4, rng)
    xc = Tensor(rng.normal(size=(2, 2, 1, 11)), requires_grad=True)
    rc = rng.normal(size=(2, 3, 1, 8))
    out["conv"] = finite_difference_check(lambda: (conv(xc) * rc).sum(), [xc, *conv.parameters()])

    pool = MaxPool(2)
    xp = Tensor(rng.normal(size=(2, 3, 1, 10)), requires_grad=True)
    rp = rng.normal(size=(2, 3, 1, 5))
    out["maxpool"] = finite_difference_check(lambda: (pool(xp) * rp).sum(), [xp])

    bn = BatchNorm2d(3)
    bn.gamma.data[:] = rng.uniform(0.5, 1.5, 3)
    bn.beta.data[:] = rng.normal(size=3)
    bn.running_mean[:] = rng.normal(size=3)
    bn.running_var[:] = rng.uniform(0.5, 2.0, 3)
    bn.eval()
    xb = Tensor(rng.normal(size=(4, 3, 1, 6)), requires_grad=True)
    rb = rng.normal(size=(4, 3, 1, 6))
    out["batchnorm_eval"] = finite_difference_check(lambda: (bn(xb) * rb).sum(), [xb, *bn.parameters()])

    bt = BatchNorm2d(3)
    xt = Tensor(rng.normal(size=(4, 3, 1, 6)), requires_grad=True)
    out["batchnorm_train"] = finite_difference_check(lambda: (bt(xt) * rb).sum(), [xt, *bt.parameters()])

    xr = Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    rr = rng.normal(size=(5, 7))
    out["relu"] = finite_difference_check(lambda: (relu(xr) * rr).sum(), [xr])

    logits = Tensor(rng.normal(size=(6, 4)) * 3, requires_grad=True)
    t = rng.integers(0, 4, size=6)
    out["softmax_cross_entropy"] = finite_difference_check(lambda: cross_entropy(logits, t), [logits])

    # full shared backbone (conv blocks in eval mode) into the step-2 head
    b = build_model(ARCH64, 3, 2, seed=seed)
    b.eval()
    X = Tensor(rng.normal(size=(3, 2, 1, 24)))
    s = rng.integers(0, 6, size=3)
    params = b.feature_extractor.parameters() + b.heads[2].parameters()
    out["backbone_step2"] = finite_difference_check(lambda: cross_entropy(b.heads[2](b.extract(X)), s), params)

    # both gradient-reversed adversarial branches: bottleneck params see -lambda * grad
    F = Tensor(rng.normal(size=(5, ARCH64.feature_length())))
    y = rng.integers(0, 3, size=5)
    d = rng.integers(0, 2, size=5)
    for step, target, lam in ((3, y, 0.5), (4, d, 0.1)):
        head = b.heads[step]
        head.grl.lam = lam
        bott = head.bottleneck.parameters()
        adv = head.adversary.parameters()
        scales = [-lam] * len(bott) + [1.0] * len(adv)
        out[f"grl_step{step}"] = finite_difference_check(
            lambda: cross_entropy(head.adversary_logits(head.bottleneck(F)), target), bott + adv, scales=scales)
    return out


def test_criterion_1_gradient_correctness():
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    for seed in GRAD_SEEDS:
        for name, err in layer_checks(seed).items():
            worst[name] = max(worst.get(name, 0.0), err)
    elapsed = time.perf_counter() - t0
    top = max(worst.values())
    ok = top <= GRAD_TOL and elapsed < 60
    detail = f"max_rel_err={top:.2e} over {len(GRAD_SEEDS)} seeds, {len(worst)} checks, {elapsed:.1f}s"
    report(1, ok, detail)


# ----------------------------------------------------------------------
# 2-3. pseudo-labelling oracles
# ----------------------------------------------------------------------

def oracle_distance(f, c, metric):
    if metric == "euclidean":
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(f, c)))
    nf = math.sqrt(sum(a * a for a in f))
    if nf == 0:
        return math.sqrt(sum((a - b) ** 2 for a, b in zip(f, c)))
    nc = math.sqrt(sum(b * b for b in c))
    if nc == 0:
        return 1.0
    return 1.0 - sum(a * b for a, b in zip(f, c)) / (nf * nc)


def oracle_assign(F, C, metric):
    labels = []
    for f in F:
        best, best_d = 0, oracle_distance(f, C[0], metric)
        for k in range(1, len(C)):
            dk = oracle_distance(f, C[k], metric)
            if dk < best_d:
                best, best_d = k, dk
        labels.append(best)
    return labels


def oracle_soft(F, W):
    n, dim = len(F), len(F[0])
    out = []
    for k in range(len(W[0])):
        mass = sum(W[i][k] for i in range(n))
        if mass < 1e-12:
            j = max(range(n), key=lambda i: (W[i][k], -i))
            out.append(list(F[j]))
            continue
        out.append([sum(W[i][k] * F[i][j] for i in range(n)) / mass for j in range(dim)])
    return out


def oracle_refine(F, provisional, K, metric):
    dim = len(F[0])
    cents, filled = [], []
    for k in range(K):
        members = [F[i] for i in range(len(F)) if provisional[i] == k]
        filled.append(bool(members))
        cents.append([sum(m[j] for m in members) / len(members) for j in range(dim)] if members else None)
    for k in range(K):
        if not filled[k]:
            live = [cents[j] for j in range(K) if filled[j]]
            gaps = [min(oracle_distance(f, c, metric) for c in live) for f in F]
            far = max(range(len(F)), key=lambda i: (gaps[i], -i))
            cents[k] = list(F[far])
            filled[k] = True
    return cents, oracle_assign(F, cents, metric)


def random_instance(rng):
    n = int(rng.integers(2, 201))
    dim = int(rng.integers(1, 9))
    K = int(rng.integers(1, 6))
    F = rng.normal(size=(n, dim))
    W = rng.dirichlet(np.full(K, 0.5), size=n)
    return F, W, K


def test_criterion_2_pseudo_label_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_centroid = 0.0
    mismatches = 0
    for i in range(100):
        metric = ("cosine", "euclidean")[i % 2]
        F, W, K = random_instance(rng)
        Fl, Wl = F.tolist(), W.tolist()
        soft = soft_centroids(F, W)
        worst_centroid = max(worst_centroid, float(np.abs(soft - np.array(oracle_soft(Fl, Wl))).max()))
        provisional = nearest_centroid_assign(F, soft, metric)
        mismatches += provisional.tolist() != oracle_assign(Fl, soft.tolist(), metric)
        provisional_labels = rng.integers(0, K, size=len(F)) if i % 5 == 0 else provisional
        res = refine_pseudo_labels(F, provisional_labels, K, metric)
        cents, labels = oracle_refine(Fl, provisional_labels.tolist(), K, metric)
        worst_centroid = max(worst_centroid, float(np.abs(res.centroids - np.array(cents)).max()))
        mismatches += res.labels.tolist() != labels
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst_centroid <= 1e-10 and elapsed < 10
    report(2, ok, f"assignment_mismatches={mismatches} max_centroid_err={worst_centroid:.1e} "
                  f"instances=100 {elapsed:.1f}s")


def test_criterion_3_lloyd_descent():
    rng = np.random.default_rng(77)
    violations, worst = 0, -np.inf
    for i in range(100):
        metric = ("euclidean", "cosine")[i % 2]
        F, W, K = random_instance(rng)
        if metric == "cosine":
            # the cluster mean is the cost minimiser only for unit-norm features
            F = F / np.linalg.norm(F, axis=1, keepdims=True)
        soft = soft_centroids(F, W)
        provisional = nearest_centroid_assign(F, soft, metric)
        res = refine_pseudo_labels(F, provisional, K, metric)
        before = assignment_cost(F, soft, provisional, metric)
        after = assignment_cost(F, res.centroids, res.labels, metric)
        worst = max(worst, after - before)
        violations += after > before + 1e-9 * max(1.0, before)
    report(3, violations == 0, f"violations={violations}/100 max_increase={worst:.2e}")


# ----------------------------------------------------------------------
# 4. algebraic collapses
# ----------------------------------------------------------------------

SMALL_ARCH = ArchConfig(conv_channels=(4, 8), bottleneck_dim=32, adv_hidden=(16, 16))


@pytest.fixture(scope="module")
def small_split():
    ds = generate_synthetic(SynthConfig(series_per_cell=3, length=128, seed=5))
    return split_train_val(ds, 0.8, 0)


def test_criterion_4_algebraic_collapses(small_split):
    tr, va = small_split
    # (a) bijectivity
    bijective = True
    for K in range(1, 11):
        for C in range(1, 21):
            d, y = np.meshgrid(np.arange(K), np.arange(C), indexing="ij")
            s = domain_class_label(d.ravel(), y.ravel(), C, K)
            dd, yy = split_domain_class(s, C)
            bijective &= sorted(s.tolist()) == list(range(K * C))
            bijective &= np.array_equal(dd, d.ravel()) and np.array_equal(yy, y.ravel())

    # (b) K=1, lambda1=lambda2=0 DIVERSIFY reproduces ERM's loss trajectory
    cfg = TrainConfig(K=1, lambda1=0.0, lambda2=0.0, rounds=3, local_epochs=2, seed=11)
    div = train(tr, va, cfg, SMALL_ARCH)
    erm = train_erm(tr, va, cfg, SMALL_ARCH)
    a = [r.L_super for r in div.history if r.step == "2"]
    b = [r.L_super for r in erm.history if r.step == "2"]
    collapse = a == b and len(a) == 6

    # (c) frozen backbone through steps 3 and 4, every round
    t = Trainer(tr, va, TrainConfig(rounds=3, local_epochs=2, lambda1=1.0, lambda2=1.0, seed=2), SMALL_ARCH)
    snap = {}
    step2 = t.step2_epoch

    def spy(r, e):
        row = step2(r, e)
        snap[r] = [v.copy() for v in t.bundle.feature_extractor.state_arrays().values()]
        return row

    t.step2_epoch = spy
    frozen = True
    for r in range(3):
        t.run_round()
        now = list(t.bundle.feature_extractor.state_arrays().values())
        frozen &= all(np.array_equal(x, y) for x, y in zip(snap[r], now))

    ok = bool(bijective) and collapse and frozen
    report(4, ok, f"(a) bijective={bool(bijective)} (b) erm_trajectory_equal={collapse} "
                  f"(c) backbone_frozen_all_rounds={frozen}")


# ----------------------------------------------------------------------
# 5-7. synthetic benchmark
# ----------------------------------------------------------------------

@pytest.fixture(scope="session")
def bench():
    t0 = time.perf_counter()
    records = run_bench(ExperimentConfig(), seeds=(1, 2, 3))
    return records, time.perf_counter() - t0


@pytest.fixture(scope="session")
def recovery():
    t0 = time.perf_counter()
    runs = [recovery_run(ExperimentConfig(), s) for s in (1, 2, 3)]
    return runs, time.perf_counter() - t0


def test_criterion_5_learned_split_divergence(bench):
    records, elapsed = bench
    rows = [r for r in records if r.method == "diversify" and r.div_learned is not None]
    per_seed = {}
    for s in (1, 2, 3):
        mine = [r for r in rows if r.seed == s]
        per_seed[s] = (np.mean([r.div_learned for r in mine]), np.mean([r.div_random for r in mine]))
    learned = float(np.mean([v[0] for v in per_seed.values()]))
    rand = float(np.mean([v[1] for v in per_seed.values()]))
    ok = len(per_seed) == 3 and learned > rand and elapsed < 300
    report(5, ok, f"learned={learned:.3f} random={rand:.3f} (3 seeds x 3 held-out, "
                  f"{len(rows)} rows) bench {elapsed:.0f}s")


def test_criterion_6_latent_domain_recovery(recovery):
    runs, elapsed = recovery
    aris = [r.ari for r in runs]
    mean = float(np.mean(aris))
    report(6, mean >= 0.5, f"mean_ari={mean:.3f} per_seed={[round(a, 3) for a in aris]} "
                           f"(threshold 0.5) {elapsed:.0f}s")


def test_criterion_7_ood_benefit_direction(bench):
    records, elapsed = bench
    s = summarize(records)
    margin = 100.0 * (s["diversify"] - s["erm"])
    ok = margin >= -1.0 and elapsed < 600
    verdict = "target +2 met" if margin >= 2.0 else "above floor, below +2 target"
    report(7, ok, f"diversify={s['diversify']:.4f} erm={s['erm']:.4f} dann={s['dann']:.4f} "
                  f"margin={margin:+.2f} points ({verdict}) runs={len(records)} bench {elapsed:.0f}s")


# ----------------------------------------------------------------------
# 8. divergence estimator
# ----------------------------------------------------------------------

def test_criterion_8_divergence_sanity():
    identical, disjoint, gauss = [], [], []
    for seed in range(3):
        rng = np.random.default_rng(500 + seed)
        A, B = rng.normal(size=(200, 4)), rng.normal(size=(200, 4))
        identical.append(proxy_h_divergence(A, B, seed=seed))
        C = rng.uniform(size=(200, 4))
        D = rng.uniform(size=(200, 4)) + np.array([2.5, 0, 0, 0])
        disjoint.append(proxy_h_divergence(C, D, seed=seed))
        a, b = rng.normal(0, 1, 400), rng.normal(2, 1, 400)
        oracle = 2 * (1 - 2 * best_threshold_error(a, b))
        gauss.append(abs(proxy_h_divergence(a, b, seed=seed) - oracle))
    ok = max(identical) <= 0.3 and min(disjoint) >= 1.8 and max(gauss) <= 0.15
    report(8, ok, f"identical_max={max(identical):.3f} disjoint_min={min(disjoint):.3f} "
                  f"gaussian_max_gap={max(gauss):.3f}")


# ----------------------------------------------------------------------
# 9. determinism and persistence
# ----------------------------------------------------------------------

def test_criterion_9_determinism_and_persistence(small_split, tmp_path):
    tr, va = small_split
    cfg = TrainConfig(rounds=3, local_epochs=1, seed=9)
    h1 = history_to_csv(train(tr, va, cfg, SMALL_ARCH).history)
    h2 = history_to_csv(train(tr, va, cfg, SMALL_ARCH).history)
    same_history = h1 == h2

    arch64 = ArchConfig(conv_channels=(4, 8), bottleneck_dim=32, adv_hidden=(16,), dtype="float64")
    full = Trainer(tr, va, cfg, arch64)
    full.run()
    part = Trainer(tr, va, cfg, arch64)
    part.run(rounds=1)
    save_checkpoint(part.bundle, tmp_path / "mid.dvfy")
    rest = Trainer(tr, va, cfg, bundle=load_checkpoint(tmp_path / "mid.dvfy"))
    rest.run()
    resumed = history_to_csv(part.history + rest.history) == history_to_csv(full.history) and all(
        np.array_equal(x, y) for x, y in zip(full.bundle.named_arrays().values(),
                                             rest.bundle.named_arrays().values()))

    ds = generate_synthetic(SynthConfig(series_per_cell=2, seed=3))
    save_dataset(ds, tmp_path / "d.dvts")
    back = load_dataset(tmp_path / "d.dvts")
    lossless = (np.array_equal(back.X, ds.X) and np.array_equal(back.y, ds.y)
                and np.array_equal(back.true_domain, ds.true_domain) and back.ids == ds.ids)
    ok = same_history and resumed and lossless
    report(9, ok, f"history_identical={same_history} resume_bitwise={resumed} dataset_lossless={lossless}")


# ----------------------------------------------------------------------
# 10. accuracy metric
# ----------------------------------------------------------------------

def test_criterion_10_accuracy_metric():
    fixtures = [
        ([0, 1, 2, 3], [0, 1, 2, 3], 4),
        ([1, 1, 1, 1, 1, 0, 0, 0, 0, 0], [1, 1, 1, 1, 1, 1, 1, 1, 1, 1], 5),
        ([2, 0, 1], [1, 2, 0], 0),
        ([0, 0, 1, 1, 2, 2, 3], [0, 1, 1, 2, 2, 3, 3], 4),
    ]
    ok = True
    for pred, labels, correct in fixtures:
        hand = sum(1 for p, y in zip(pred, labels) if p == y)
        ok &= hand == correct and accuracy(pred, labels) == correct / len(labels)
    for p, y in itertools.product(range(3), repeat=2):
        ok &= accuracy([p], [y]) == float(p == y)
    report(10, bool(ok), f"{len(fixtures)} fixtures + 9 single-segment cases exact")
