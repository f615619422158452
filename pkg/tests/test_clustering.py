import csv
import warnings

import numpy as np
import pytest

from caemle.cae import CaeConfig, build_cae, pretrain
from caemle.clustering import (ClusteringConfig, hard_labels, joint_loss_and_grads, kl_loss,
                               soft_assign, target_distribution, train_cae_mle, write_history)
from caemle.data import make_synthetic_blobs
from caemle.metrics import acc
from oracles import numeric_grad, rel_error, target_distribution_scalar

TINY = CaeConfig(input_shape=(1, 8, 8), embedding_dim=3, filters=(2, 3, 2), kernels=(3, 3, 2), seed=5)


def test_soft_assign_examples():
    assert soft_assign(np.zeros((4, 2)), np.ones((1, 2))).tolist() == [[1.0]] * 4
    np.testing.assert_allclose(soft_assign([[0.0, 0.0]], [[1.0, 0.0], [-1.0, 0.0]]), [[0.5, 0.5]])
    np.testing.assert_allclose(soft_assign([[0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]),
                               [[2 / 3, 1 / 3]], atol=1e-6)
    with pytest.raises(ValueError):
        soft_assign(np.zeros((2, 3)), np.zeros((2, 2)))


def test_soft_assign_rows():
    rng = np.random.default_rng(0)
    q = soft_assign(rng.standard_normal((50, 4)), rng.standard_normal((6, 4)))
    np.testing.assert_allclose(q.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((q > 0) & (q < 1))


def test_target_distribution_examples():
    p = target_distribution([[0.8, 0.2], [0.2, 0.8]])
    np.testing.assert_allclose(p, [[0.9412, 0.0588], [0.0588, 0.9412]], atol=1e-4)
    np.testing.assert_allclose(p[0], [16 / 17, 1 / 17], atol=1e-12)
    np.testing.assert_allclose(target_distribution(np.full((5, 4), 0.25)), 0.25)
    with pytest.raises(ValueError):
        target_distribution([[1.0, 0.0], [1.0, 0.0]])


def test_target_distribution_matches_scalar_oracle():
    rng = np.random.default_rng(1)
    q = soft_assign(rng.standard_normal((9, 3)), rng.standard_normal((4, 3)))
    np.testing.assert_allclose(target_distribution(q), target_distribution_scalar(q), rtol=1e-12)


def test_sharpening_with_equal_column_mass():
    rng = np.random.default_rng(2)
    for _ in range(200):
        s = int(rng.integers(2, 5))
        row = rng.dirichlet(np.ones(s))
        # cyclic shifts of one row give a Q whose columns all have the same mass
        q = np.array([np.roll(row, k) for k in range(s)])
        p = target_distribution(q)
        assert np.array_equal(p.argmax(axis=1), q.argmax(axis=1))
        assert np.all(p.max(axis=1) >= q.max(axis=1) - 1e-15)


def test_kl_loss_examples():
    q = np.array([[0.3, 0.7], [0.6, 0.4]])
    assert kl_loss(q, q)[0] == 0.0
    assert kl_loss([[1.0, 0.0]], [[0.5, 0.5]])[0] == pytest.approx(np.log(2), abs=1e-12)
    with pytest.raises(ValueError):
        kl_loss(np.ones((2, 2)) / 2, np.ones((2, 3)) / 3)


@pytest.mark.parametrize("seed", range(5))
def test_kl_gradients_finite_difference(seed):
    rng = np.random.default_rng(seed)
    z, mu = rng.standard_normal((6, 3)), rng.standard_normal((3, 3))
    p = target_distribution(soft_assign(rng.standard_normal((6, 3)), mu))
    _, gz, gmu = kl_loss(p, soft_assign(z, mu), z, mu)

    def f():
        return kl_loss(p, soft_assign(z, mu))[0]

    assert rel_error(list(numeric_grad(f, z).values()), gz.ravel()) <= 1e-4
    assert rel_error(list(numeric_grad(f, mu).values()), gmu.ravel()) <= 1e-4


def test_joint_loss_gradients_finite_difference():
    rng = np.random.default_rng(3)
    model = build_cae(TINY)
    for prm in model.parameters():
        prm += 0.1 * rng.standard_normal(prm.shape)
    x = rng.standard_normal((4, 1, 8, 8))
    mu = rng.standard_normal((3, 3))
    p = target_distribution(soft_assign(rng.standard_normal((4, 3)), mu))
    gamma = 0.7
    _, _, grads = joint_loss_and_grads(model, x, mu, p, gamma)
    params = model.parameters() + [mu]
    assert len(grads) == len(params)

    def f():
        lr, lc, _ = joint_loss_and_grads(model, x, mu, p, gamma)
        return lr + gamma * lc

    for prm, g in zip(params, grads):
        idx = rng.choice(prm.size, size=min(prm.size, 6), replace=False)
        num = numeric_grad(f, prm, 1e-5, idx)
        assert rel_error([num[i] for i in idx], g.ravel()[idx]) <= 1e-4


def test_hard_labels():
    assert hard_labels(np.eye(3)[[2, 0, 1]]).tolist() == [2, 0, 1]
    assert hard_labels([[0.25] * 4]).tolist() == [0]
    q = np.random.default_rng(4).dirichlet(np.ones(5), 30)
    loop = [max(range(5), key=lambda j, r=r: (r[j], -j)) for r in q]
    assert hard_labels(q).tolist() == loop


def _blobs_model(seed, per_class=40, sigma=0.3):
    data = make_synthetic_blobs(classes=3, per_class=per_class, image_size=16, sigma=sigma, seed=seed)
    model = build_cae(CaeConfig(input_shape=(1, 16, 16), epochs=20, batch_size=32, seed=seed))
    pretrain(model, data.images)
    return data, model


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_separable_blobs_reach_full_accuracy(seed):
    data, model = _blobs_model(seed)
    cfg = ClusteringConfig(n_clusters=3, update_interval=10, batch_size=32, max_iter=200, seed=seed)
    res = train_cae_mle(model, data.images, cfg)
    assert acc(data.labels, res.labels) == 1.0
    assert res.history and res.history[0]["iteration"] == 0
    for row in res.history:
        assert row["L_c"] >= 0.0
        assert row["L"] == pytest.approx(row["L_r"] + 0.1 * row["L_c"])


def test_gamma_zero_keeps_centroids():
    data, model = _blobs_model(0)
    from caemle.hierarchy import agglomerate

    init_mu = agglomerate(model.encode(data.images), 3)[0].centroids
    cfg = ClusteringConfig(n_clusters=3, gamma=0.0, update_interval=5, batch_size=30,
                           max_iter=30, tol=0.0, ac_refresh=False)
    with warnings.catch_warnings():
        warnings.simplefilter("error")  # an empty-cluster re-anchor would move the centroids
        res = train_cae_mle(model, data.images, cfg)
    np.testing.assert_array_equal(res.centroids, init_mu)
    assert res.iterations == 30


def test_kmeans_baseline_and_convergence_flag():
    data, model = _blobs_model(1, per_class=20)
    cfg = ClusteringConfig(n_clusters=3, init="kmeans", update_interval=5, batch_size=20, max_iter=100)
    res = train_cae_mle(model, data.images, cfg)
    assert res.converged and res.iterations < 100
    assert res.history[-1]["label_change"] < cfg.tol


@pytest.mark.filterwarnings("ignore:empty cluster")
def test_training_is_deterministic():
    out = []
    for _ in range(2):
        data, model = _blobs_model(2, per_class=20)
        cfg = ClusteringConfig(n_clusters=3, update_interval=5, batch_size=15, max_iter=20, tol=0.0)
        out.append(train_cae_mle(model, data.images, cfg))
    assert out[0].q.tobytes() == out[1].q.tobytes()
    assert out[0].centroids.tobytes() == out[1].centroids.tobytes()


def test_extra_features_widen_centroids():
    data, model = _blobs_model(0, per_class=10)
    extra = np.random.default_rng(0).uniform(-2.5, 2.5, (30, 4))
    cfg = ClusteringConfig(n_clusters=3, update_interval=5, batch_size=10, max_iter=10)
    res = train_cae_mle(model, data.images, cfg, extra_features=extra)
    assert res.centroids.shape == (3, 10 + 4)
    with pytest.raises(ValueError):
        train_cae_mle(model, data.images, cfg, extra_features=extra[:5])


def test_config_validation():
    with pytest.raises(ValueError):
        ClusteringConfig(init="spectral")
    with pytest.raises(ValueError):
        ClusteringConfig(gamma=-1)


def test_write_history(tmp_path):
    rows = [{"iteration": 0, "L_r": 1.5, "L_c": 0.25, "L": 1.525, "label_change": 1.0}]
    write_history(tmp_path / "h.csv", rows)
    with open(tmp_path / "h.csv") as fh:
        got = list(csv.DictReader(fh))
    assert float(got[0]["L_c"]) == 0.25 and got[0]["iteration"] == "0"
