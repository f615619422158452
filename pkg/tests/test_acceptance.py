"""Acceptance suite: one test (and one printed PASS/FAIL line) per criterion.

Criteria 6 and 7 need the real datasets:

    CAEMLE_USPS=/path/usps.bin        USPS matrix file (see README)
    CAEMLE_MNIST_DIR=/path/mnist      directory with the four MNIST IDX files
    CAEMLE_ACCEPT_EPOCHS=200          pretraining epochs for those runs

Without them the two criteria are reported as BLOCKED and skipped.
"""

import copy
import json
import os
import time
from dataclasses import replace

import numpy as np
import pytest

from _report import record
from caemle import cli, nn
from caemle.cae import CaeConfig, build_cae, pretrain
from caemle.clustering import (ClusteringConfig, joint_loss_and_grads, kl_loss, soft_assign,
                               target_distribution, train_cae_mle)
from caemle.data import load_mnist, load_usps, make_synthetic_blobs
from caemle.hierarchy import agglomerate, cut, linkage, ward_delta
from caemle.ifl import IflConfig, _round_task, deep_ifl, inner_folds
from caemle.metrics import acc, nmi
from oracles import (as_partition, brute_force_acc, ess, layer_grad_error, naive_ward, nmi_from_counts,
                     numeric_grad, rel_error)

GRAD_TOL = 1e-4
FD_EPS = 1e-5


def _random_layer(kind, rng):
    if kind == "conv":
        layer = nn.Conv2D(int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.choice([1, 2, 3, 5])),
                          int(rng.integers(1, 3)), rng.choice(["same", 0, 1]), rng=rng)
        shape = (2, layer.in_channels, 5, 5)
    elif kind == "deconv":
        out = (int(rng.integers(3, 7)), int(rng.integers(3, 7)))
        layer = nn.Deconv2D(int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.choice([2, 3, 5])),
                            int(rng.integers(1, 3)), "same", output_size=out, rng=rng)
        shape = (2, layer.in_channels) + layer._geometry()[1:]
    elif kind == "dense":
        layer = nn.Dense(int(rng.integers(1, 8)), int(rng.integers(1, 6)), rng=rng)
        shape = (3, layer.in_features)
    elif kind == "relu":
        layer, shape = nn.ReLU(), (2, 3, 4)
    elif kind == "flatten":
        layer, shape = nn.Flatten(), (2, 2, 3, 2)
    else:
        layer, shape = nn.Reshape((2, 3)), (3, 6)
    for arr in layer.params.values():
        arr[...] = rng.standard_normal(arr.shape)
    x = rng.standard_normal(shape)
    if kind == "relu":
        x[np.abs(x) < 1e-3] = 0.5
    return layer, x


def _composite_error(rng):
    cfg = CaeConfig(input_shape=(1, int(rng.integers(6, 10)), int(rng.integers(6, 10))),
                    embedding_dim=int(rng.integers(2, 5)), filters=(2, 3, 2), kernels=(3, 3, 2),
                    seed=int(rng.integers(1000)))
    model = build_cae(cfg)
    for prm in model.parameters():
        prm += 0.1 * rng.standard_normal(prm.shape)
    s = int(rng.integers(2, 5))
    x = rng.standard_normal((3,) + cfg.input_shape)
    mu = rng.standard_normal((s, cfg.embedding_dim))
    p = target_distribution(soft_assign(rng.standard_normal((3, cfg.embedding_dim)), mu))
    gamma = float(rng.uniform(0.05, 1.0))
    _, _, grads = joint_loss_and_grads(model, x, mu, p, gamma)

    def f():
        lr, lc, _ = joint_loss_and_grads(model, x, mu, p, gamma)
        return lr + gamma * lc

    worst = 0.0
    for prm, g in zip(model.parameters() + [mu], grads):
        idx = rng.choice(prm.size, size=min(prm.size, 5), replace=False)
        num = numeric_grad(f, prm, FD_EPS, idx)
        worst = max(worst, rel_error([num[i] for i in idx], g.ravel()[idx]))
    return worst


def test_criterion_1_gradient_suite():
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = {}
    kinds = ["conv", "deconv", "dense", "relu", "flatten", "reshape"]
    for i in range(24):
        kind = kinds[i % len(kinds)]
        layer, x = _random_layer(kind, rng)
        worst[kind] = max(worst.get(kind, 0.0), layer_grad_error(layer, x, rng, FD_EPS))
    worst["L_r+gamma*L_c"] = max(_composite_error(rng) for _ in range(6))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= GRAD_TOL and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    record(1, "PASS" if ok else "FAIL", f"30 configs, worst rel err {detail}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_ward_oracle():
    rng = np.random.default_rng(7)
    t0 = time.perf_counter()
    mismatches = 0
    for _ in range(50):
        n, d = int(rng.integers(2, 201)), int(rng.integers(1, 11))
        x = rng.standard_normal((n, d)) * rng.uniform(0.1, 10)
        tree, ref = linkage(x), naive_ward(x)
        mismatches += sum(as_partition(cut(tree, s)) != ref[s] for s in range(1, n + 1))
    worst = 0.0
    for _ in range(1000):
        d = int(rng.integers(1, 11))
        a = rng.standard_normal((int(rng.integers(1, 20)), d))
        b = rng.standard_normal((int(rng.integers(1, 20)), d)) + rng.standard_normal(d)
        delta = ward_delta(len(a), a.mean(0), len(b), b.mean(0))
        worst = max(worst, abs(delta - (ess(np.vstack([a, b])) - ess(a) - ess(b))))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst <= 1e-9 and elapsed < 120
    record(2, "PASS" if ok else "FAIL",
           f"50 sets, {mismatches} partition mismatches; max |delta - dESS| {worst:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_3_metric_oracles():
    rng = np.random.default_rng(3)
    acc_bad = 0
    checked = 0
    # every labelling of up to 5 points into <= 4 classes vs every clustering
    for n in range(1, 6):
        words = np.array(np.meshgrid(*[range(4)] * n)).reshape(n, -1).T
        for y in words[:: max(1, len(words) // 40)]:
            for c in words:
                acc_bad += acc(y, c) != pytest.approx(brute_force_acc(y, c), abs=1e-15)
                checked += 1
    for _ in range(2000):
        n = int(rng.integers(6, 9))
        y, c = rng.integers(0, 4, n), rng.integers(0, 4, n)
        acc_bad += acc(y, c) != pytest.approx(brute_force_acc(y, c), abs=1e-15)
        checked += 1
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 300))
        y = rng.integers(0, int(rng.integers(1, 8)), n)
        c = rng.integers(0, int(rng.integers(1, 8)), n)
        worst = max(worst, abs(nmi(y, c) - nmi_from_counts(y, c)))
    ok = acc_bad == 0 and worst <= 1e-12
    record(3, "PASS" if ok else "FAIL",
           f"acc == brute force on {checked} instances ({acc_bad} off); nmi max err {worst:.1e} on 100 tables")
    assert ok


def test_criterion_4_formula_fixtures():
    q = soft_assign([[0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]])
    p = target_distribution([[0.8, 0.2], [0.2, 0.8]])
    err_q = np.abs(q - [[2 / 3, 1 / 3]]).max()
    err_p = np.abs(p - [[0.9412, 0.0588], [0.0588, 0.9412]]).max()
    # the fixture is printed to 4 decimals; the exact value is 16/17
    err_exact = np.abs(p[0] - [16 / 17, 1 / 17]).max()
    kl = kl_loss([[1.0, 0.0]], [[0.5, 0.5]])[0]
    ok = err_q <= 1e-6 and err_exact <= 1e-6 and err_p <= 1e-4 and abs(kl - np.log(2)) <= 1e-12
    record(4, "PASS" if ok else "FAIL",
           f"soft_assign err {err_q:.1e}; target err {err_exact:.1e} vs 16/17 ({err_p:.1e} vs 4-digit fixture)")
    assert ok


E2E_CAE = CaeConfig(input_shape=(1, 16, 16), epochs=20, batch_size=64)
E2E_CLU = ClusteringConfig(n_clusters=3, update_interval=20, batch_size=64, max_iter=300)


@pytest.mark.slow
def test_criterion_5_separable_end_to_end():
    t0 = time.perf_counter()
    scores = {"cae_mle": [], "deep_ifl": []}
    for seed in range(3):
        data = make_synthetic_blobs(classes=3, per_class=100, image_size=16, sigma=0.1, seed=seed)
        model = build_cae(replace(E2E_CAE, seed=seed))
        pretrain(model, data.images)
        res = train_cae_mle(model, data.images, replace(E2E_CLU, seed=seed))
        scores["cae_mle"].append(float(acc(data.labels, res.labels)))
        ifl = deep_ifl(data.images, replace(E2E_CAE, seed=seed), replace(E2E_CLU, seed=seed),
                       IflConfig(r=10, seed=seed))
        scores["deep_ifl"].append(float(acc(data.labels, ifl.labels)))
    elapsed = time.perf_counter() - t0
    ok = all(v == 1.0 for vals in scores.values() for v in vals) and elapsed < 600
    record(5, "PASS" if ok else "FAIL",
           f"ACC cae_mle {scores['cae_mle']}, deep_ifl {scores['deep_ifl']}; {elapsed:.0f}s")
    assert ok


def _epochs():
    return int(os.environ.get("CAEMLE_ACCEPT_EPOCHS", "200"))


def _cae_mle_pair(images, seed, with_baseline):
    """CAE-MLE and (optionally) the k-means-init baseline from one shared pretrained model."""
    model = build_cae(CaeConfig(input_shape=images.shape[1:], epochs=_epochs(), seed=seed))
    pretrain(model, images)
    base = copy.deepcopy(model) if with_baseline else None
    clu = ClusteringConfig(n_clusters=10, seed=seed)
    res = train_cae_mle(model, images, clu)
    base_res = train_cae_mle(base, images, replace(clu, init="kmeans")) if with_baseline else None
    return res, base_res


@pytest.mark.slow
@pytest.mark.dataset
def test_criterion_6_usps():
    path = os.environ.get("CAEMLE_USPS")
    if not path or not os.path.exists(path):
        record(6, "BLOCKED", "USPS file not available (set CAEMLE_USPS); see decisions ledger")
        pytest.skip("USPS data not available")
    data = load_usps(path)
    seeds = range(5)
    cm_acc, cm_nmi, base_acc, ifl_acc = [], [], [], []
    for seed in seeds:
        res, base = _cae_mle_pair(data.images, seed, with_baseline=True)
        cm_acc.append(float(acc(data.labels, res.labels)))
        cm_nmi.append(nmi(data.labels, res.labels))
        base_acc.append(acc(data.labels, base.labels))
        cae = CaeConfig(input_shape=(1, 16, 16), epochs=_epochs(), seed=seed)
        ifl = deep_ifl(data.images, cae, ClusteringConfig(n_clusters=10, seed=seed), IflConfig(r=10, seed=seed))
        ifl_acc.append(float(acc(data.labels, ifl.labels)))
    m_acc, m_nmi, m_base, m_ifl = (float(np.mean(v)) for v in (cm_acc, cm_nmi, base_acc, ifl_acc))
    ok_a = m_acc >= 0.85 and m_nmi >= 0.80
    ok_b = m_acc - m_base >= 0.05
    ok_c = m_ifl >= m_acc - 0.005
    ok = ok_a and ok_b and ok_c
    record(6, "PASS" if ok else "FAIL",
           f"(a) ACC {m_acc:.4f} NMI {m_nmi:.4f}; (b) baseline ACC {m_base:.4f}, delta {m_acc - m_base:+.4f}; "
           f"(c) deep-ifl ACC {m_ifl:.4f}{' improves' if m_ifl > m_acc else ''}")
    assert ok


@pytest.mark.slow
@pytest.mark.dataset
def test_criterion_7_mnist_subsample():
    root = os.environ.get("CAEMLE_MNIST_DIR")
    if not root or not os.path.isdir(root):
        record(7, "BLOCKED", "MNIST files not available (set CAEMLE_MNIST_DIR); full-MNIST declared out of scope")
        pytest.skip("MNIST data not available")
    data = load_mnist(root)
    idx = np.sort(np.random.default_rng(0).choice(len(data), 10_000, replace=False))
    sub = data.subset(idx)
    scores = [acc(sub.labels, _cae_mle_pair(sub.images, seed, False)[0].labels) for seed in range(3)]
    ok = float(np.mean(scores)) >= 0.80
    record(7, "PASS" if ok else "FAIL", f"10k-subsample CAE-MLE ACC {scores}, mean {np.mean(scores):.4f}")
    assert ok


def test_criterion_8_ifl_structure():
    rng = np.random.default_rng(8)
    t0 = time.perf_counter()
    failures = []
    for trial in range(4):
        classes = int(rng.integers(2, 5))
        r = int(rng.integers(2, 6))
        data = make_synthetic_blobs(classes=classes, per_class=int(rng.integers(8, 15)), image_size=8,
                                    sigma=0.1, seed=trial)
        n = len(data)
        cae = CaeConfig(input_shape=(1, 8, 8), embedding_dim=int(rng.integers(2, 6)), filters=(4, 4, 4),
                        kernels=(3, 3, 3), epochs=2, batch_size=16, seed=trial)
        clu = ClusteringConfig(n_clusters=classes, update_interval=3, batch_size=16, max_iter=6)
        res = deep_ifl(data.images, cae, clu, IflConfig(r=r, seed=trial))
        s = classes
        counts = np.bincount(res.folding.folds, minlength=r)
        if counts.sum() != n or counts.max() - counts.min() > 1:
            failures.append(f"trial {trial}: fold sizes {counts.tolist()}")
        if res.features.shape != (n, s + 2):
            failures.append(f"trial {trial}: feature shape {res.features.shape}")
        w = res.features[:, 1:s + 1]
        if not np.array_equal(res.features[:, -1], w.min(axis=1)):
            failures.append(f"trial {trial}: weight-of-closest != min(weights)")
        for rnd in res.rounds:
            _, te = res.folding.split(rnd.fold)
            frac = rnd.sizes[w[te].argmin(axis=1)] / rnd.sizes.sum()
            if not np.allclose(res.features[te, 0], frac, rtol=0, atol=1e-15):
                failures.append(f"trial {trial}: confidence mismatch in fold {rnd.fold}")
        # leakage: perturb the held-out fold and retrain that round
        j = int(rng.integers(r))
        _, te = res.folding.split(j)
        pert = data.images.copy()
        pert[te] += rng.standard_normal(pert[te].shape)
        seed_j = int(np.random.SeedSequence(trial).spawn(r)[j].generate_state(1)[0])
        a = _round_task((data.images, res.folding, j, cae, clu, IflConfig(r=r, seed=trial), seed_j))
        b = _round_task((pert, res.folding, j, cae, clu, IflConfig(r=r, seed=trial), seed_j))
        same = all(x.tobytes() == y.tobytes() for x, y in zip(a.model.parameters(), b.model.parameters()))
        if not (same and a.centroids.tobytes() == b.centroids.tobytes()):
            failures.append(f"trial {trial}: inner-test perturbation changed fold {j} training")
    # fold exactness on many more random sizes
    for _ in range(200):
        r = int(rng.integers(2, 12))
        n = int(rng.integers(r, 500))
        counts = np.bincount(inner_folds(n, r, int(rng.integers(10**6))).folds, minlength=r)
        if counts.sum() != n or counts.max() - counts.min() > 1:
            failures.append(f"inner_folds({n}, {r}) sizes {counts.tolist()}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 300
    record(8, "PASS" if ok else "FAIL",
           f"4 deep-ifl trials + 200 foldings, {len(failures)} violations; {elapsed:.1f}s"
           + (f" [{failures[0]}]" if failures else ""))
    assert ok


def test_criterion_9_determinism(tmp_path):
    text = """
[experiment]
pipeline = {pipeline}
seeds = 0, 1
output_dir = {out}
[dataset]
kind = synthetic
per_class = 30
sigma = 0.2
[cae]
epochs = 5
batch_size = 32
[clustering]
n_clusters = 3
update_interval = 10
batch_size = 32
max_iter = 60
[ifl]
r = 3
"""
    values = {}
    for pipeline in ("cae_mle", "deep_ifl"):
        for run in ("a", "b"):
            cfg = tmp_path / f"{pipeline}_{run}.ini"
            cfg.write_text(text.format(pipeline=pipeline, out=tmp_path / f"{pipeline}_{run}"))
            assert cli.main(["run", str(cfg)]) == 0
            payload = json.loads((tmp_path / f"{pipeline}_{run}" / "results.json").read_text())
            values[pipeline, run] = [(r["acc"], r["nmi"], r["final_L_r"]) for r in payload["per_seed"]]
    same = all(values[p, "a"] == values[p, "b"] for p in ("cae_mle", "deep_ifl"))
    record(9, "PASS" if same else "FAIL",
           f"two runs x 2 seeds x 2 pipelines, ACC/NMI/L_r bit-identical: {same}")
    assert same
