"""Joint reconstruction + KL clustering on the autoencoder embedding (CAE-MLE).

Centroids start from ward agglomeration of the embedding and, when
``ac_refresh`` is on, are periodically re-anchored to fresh ward centroids of
the current embedding. Between target refreshes P is held fixed.
"""

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.optimize import linear_sum_assignment

from . import nn
from .cae import TrainingDivergedError, reconstruction_step
from .hierarchy import agglomerate

log = logging.getLogger(__name__)


@dataclass
class ClusteringConfig:
    n_clusters: int = 10
    gamma: float = 0.1
    update_interval: int = 140
    tol: float = 0.001
    batch_size: int = 256
    max_iter: int = 20000
    lr: float = 1e-3
    init: str = "ac"  # "ac" or "kmeans" (k-means initialisation baseline)
    ac_refresh: bool = True
    ac_refresh_period: int = 5  # in target refreshes
    subsample: int = None  # agglomerate a random subset of this size when set
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ValueError("n_clusters must be >= 1")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if self.init not in ("ac", "kmeans"):
            raise ValueError(f"init must be 'ac' or 'kmeans', got {self.init!r}")
        if self.update_interval < 1 or self.batch_size < 1 or self.ac_refresh_period < 1:
            raise ValueError("update_interval, batch_size and ac_refresh_period must be >= 1")


@dataclass
class ClusteringState:
    centroids: np.ndarray
    gamma: float
    q: np.ndarray = None
    p: np.ndarray = None
    labels: np.ndarray = None
    refreshes: int = 0
    empty_streak: int = 0


@dataclass
class CaeMleResult:
    model: object
    labels: np.ndarray
    centroids: np.ndarray
    q: np.ndarray
    history: list = field(default_factory=list)
    iterations: int = 0
    converged: bool = False

    @property
    def sizes(self):
        return np.bincount(self.labels, minlength=len(self.centroids))


def _sq_dist(z, mu):
    diff = z[:, None, :] - mu[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def soft_assign(z, mu):
    """Student's t (one degree of freedom) similarities, normalized per row."""
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if z.ndim != 2 or mu.ndim != 2 or z.shape[1] != mu.shape[1]:
        raise ValueError(f"dimension mismatch: Z {z.shape} vs centroids {mu.shape}")
    k = 1.0 / (1.0 + _sq_dist(z, mu))
    return k / k.sum(axis=1, keepdims=True)


def target_distribution(q):
    """Square Q, divide by column mass, renormalize rows."""
    q = np.asarray(q, dtype=np.float64)
    f = q.sum(axis=0)
    if np.any(f <= 0):
        raise ValueError("soft assignment has a cluster with zero total mass")
    w = q * q / f
    return w / w.sum(axis=1, keepdims=True)


def kl_loss(p, q, z=None, mu=None):
    """KL(P || Q) summed over all rows and clusters, with 0 log 0 = 0.

    When ``z`` and ``mu`` are given, also returns the gradients w.r.t. both,
    treating P as a constant and Q as ``soft_assign(z, mu)``. Returns
    ``(loss, grad_z, grad_mu)``; the gradients are None without ``z``/``mu``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: P {p.shape} vs Q {q.shape}")
    pos = p > 0
    loss = float(np.sum(p[pos] * np.log(p[pos] / q[pos])))
    if z is None or mu is None:
        return loss, None, None
    z = np.asarray(z, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    if z.shape[0] != p.shape[0] or mu.shape[0] != p.shape[1] or z.shape[1] != mu.shape[1]:
        raise ValueError(f"shape mismatch: P {p.shape}, Z {z.shape}, centroids {mu.shape}")
    k = 1.0 / (1.0 + _sq_dist(z, mu))
    # dL/dz_i = 2 sum_j (p_ij - q_ij) k_ij (z_i - mu_j); mu gets the negated sum over i
    w = 2.0 * (p - q) * k
    grad_z = w.sum(axis=1, keepdims=True) * z - w @ mu
    grad_mu = w.sum(axis=0)[:, None] * mu - w.T @ z
    return loss, grad_z, grad_mu


def hard_labels(q):
    """Row-wise argmax; ties go to the lowest index."""
    return np.argmax(np.asarray(q), axis=1)


def kmeans_init(z, s, seed, n_init=10):
    """Best-of-``n_init`` k-means++ centroids (baseline initialisation)."""
    rng = np.random.default_rng(seed)
    best, best_inertia = None, np.inf
    for _ in range(n_init):
        mu, lab = kmeans2(z, s, minit="++", seed=rng)
        inertia = float(np.sum((z - mu[lab]) ** 2))
        if inertia < best_inertia:
            best, best_inertia = mu, inertia
    return best


def _match_to(old_mu, new_mu):
    """Permute ``new_mu`` so each row lands on the closest old centroid id."""
    cost = _sq_dist(old_mu, new_mu)
    rows, cols = linear_sum_assignment(cost)
    out = np.empty_like(new_mu)
    out[rows] = new_mu[cols]
    return out


def _augment(z, extra, idx=None):
    if extra is None:
        return z
    return np.concatenate([z, extra if idx is None else extra[idx]], axis=1)


def _check_rows(mat, name):
    if not np.allclose(mat.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise AssertionError(f"{name} rows do not sum to 1")


def joint_loss_and_grads(model, batch, centroids, p, gamma, extra=None):
    """L_r + gamma * L_c on one batch with P held fixed.

    Returns ``(L_r, L_c, grads)`` where ``grads`` follows
    ``model.parameters() + [centroids]``. L_r is averaged over the batch; L_c
    is summed over the batch rows.
    """
    loss_r, dec_grads, z, enc_ctx, g_z = reconstruction_step(model, batch)
    za = _augment(z, extra)
    q = soft_assign(za, centroids)
    loss_c, gz_c, gmu = kl_loss(p, q, za, centroids)
    g_z = g_z + gamma * gz_c[:, : z.shape[1]]
    _, enc_grads = model.encoder.backward(g_z, enc_ctx)
    return loss_r, loss_c, enc_grads + dec_grads + [gamma * gmu]


def train_cae_mle(model, images, cfg, extra_features=None):
    """Fine-tune ``model`` jointly on L_r + gamma * L_c and cluster the embedding.

    ``images`` must be normalized already. ``extra_features`` (n x e), when
    given, is concatenated to the embedding before the clustering layer; it
    takes no gradient. Stops once the fraction of hard labels that changed
    between two target refreshes drops below ``cfg.tol``, or at ``max_iter``.
    """
    images = model._check_input(images).astype(model.config.dtype, copy=False)
    n, s = images.shape[0], cfg.n_clusters
    if n < s:
        raise ValueError(f"{n} instances cannot form {s} clusters")
    if extra_features is not None:
        extra_features = np.asarray(extra_features, dtype=np.float64)
        if extra_features.shape[0] != n:
            raise ValueError("extra_features must have one row per instance")
    d = model.embedding_dim
    rng = np.random.default_rng(cfg.seed)

    def full_embedding():
        return _augment(model.encode(images), extra_features)

    def ac_centroids(z):
        return agglomerate(z, s, subsample=cfg.subsample, seed=int(rng.integers(2**31)))[0].centroids

    z_all = full_embedding()
    if cfg.init == "ac":
        mu = ac_centroids(z_all)
    else:
        mu = kmeans_init(z_all, s, int(rng.integers(2**31)))
    state = ClusteringState(centroids=np.array(mu, dtype=np.float64), gamma=cfg.gamma)

    params = model.parameters() + [state.centroids]
    opt = nn.Adam(cfg.lr)
    history = []
    order = rng.permutation(n)
    cursor = 0
    converged = False
    ite = 0
    while True:
        if ite % cfg.update_interval == 0:
            if ite > 0:
                z_all = full_embedding()
            state.q = soft_assign(z_all, state.centroids)
            labels = hard_labels(state.q)
            sizes = np.bincount(labels, minlength=s)
            reanchor = False
            if s > 1 and np.any(sizes == 0):
                state.empty_streak += 1
                if state.empty_streak >= 2:
                    warnings.warn(f"empty cluster(s) {np.flatnonzero(sizes == 0).tolist()} at "
                                  f"iteration {ite}; re-anchoring centroids to ward clusters")
                    reanchor = True
            else:
                state.empty_streak = 0
            if (cfg.ac_refresh and ite > 0 and state.refreshes % cfg.ac_refresh_period == 0):
                reanchor = True
            if reanchor:
                state.centroids[:] = _match_to(state.centroids, ac_centroids(z_all))
                state.empty_streak = 0
                state.q = soft_assign(z_all, state.centroids)
                labels = hard_labels(state.q)
            state.p = target_distribution(state.q)
            _check_rows(state.q, "Q")
            _check_rows(state.p, "P")
            delta = 1.0 if state.labels is None else float(np.mean(labels != state.labels))
            state.labels = labels
            state.refreshes += 1
            lc = kl_loss(state.p, state.q)[0] / n
            rec = model.decoder.predict(z_all[:, :d])
            lr_full = float(np.sum((rec - images) ** 2) / n)
            history.append({"iteration": ite, "L_r": lr_full, "L_c": lc,
                            "L": lr_full + cfg.gamma * lc, "label_change": delta})
            log.debug("ite %d: L_r=%.5g L_c=%.5g delta=%.4g", ite, lr_full, lc, delta)
            if ite > 0 and delta < cfg.tol:
                converged = True
                break
        if ite >= cfg.max_iter:
            break

        if cursor + cfg.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + cfg.batch_size]
        cursor += len(idx)
        batch = images[idx]
        extra = None if extra_features is None else extra_features[idx]
        try:
            loss_r, loss_c, grads = joint_loss_and_grads(
                model, batch, state.centroids, state.p[idx], cfg.gamma, extra)
            if not (np.isfinite(loss_r) and np.isfinite(loss_c)):
                raise nn.NonFiniteError("joint loss")
            opt.step(params, grads)
        except nn.NonFiniteError as exc:
            raise TrainingDivergedError(f"joint training diverged at iteration {ite}: {exc}") from exc
        model.bump_version()
        ite += 1

    q = soft_assign(full_embedding(), state.centroids)
    return CaeMleResult(model, hard_labels(q), state.centroids.copy(), q, history, ite, converged)


def write_history(path, history):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "L_r", "L_c", "L", "label_change"])
        for row in history:
            writer.writerow([row["iteration"], repr(row["L_r"]), repr(row["L_c"]),
                             repr(row["L"]), repr(row["label_change"])])
