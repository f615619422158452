"""Deep inverse feature learning on top of CAE-MLE.

Every instance is featurized by a model that never saw it. The data are split
into ``r`` folds; in each round CAE-MLE learns clusters on ``r - 1`` folds,
which then describe the held-out fold. Each instance gets
``s + 2`` error-representation features::

    confidence          size fraction of the closest inner-train cluster
    weight_1..weight_s  latent distance to every inner-train centroid
    weight_closest      the smallest of those distances
"""

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import linear_sum_assignment

from .cae import build_cae, pretrain
from .clustering import train_cae_mle

log = logging.getLogger(__name__)

FEATURE_RANGE = 2.5


@dataclass
class InnerFolding:
    r: int
    folds: np.ndarray  # fold index per instance
    seed: int

    def split(self, j):
        """(inner-train indices, inner-test indices) for round ``j``."""
        return np.flatnonzero(self.folds != j), np.flatnonzero(self.folds == j)


@dataclass
class IflConfig:
    r: int = 10
    round_budget: float = 0.5  # fraction of the full-run epochs / iterations per round
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.r < 2:
            raise ValueError("r must be >= 2")
        if not 0 < self.round_budget <= 1:
            raise ValueError("round_budget must be in (0, 1]")


@dataclass
class RoundResult:
    fold: int
    model: object
    train_labels: np.ndarray
    sizes: np.ndarray
    centroids: np.ndarray
    z_test: np.ndarray


@dataclass
class IflResult:
    labels: np.ndarray
    features: np.ndarray  # raw, n x (s + 2)
    normalized: np.ndarray
    folding: InnerFolding
    final: object  # CaeMleResult of the final stage
    rounds: list


def inner_folds(n, r, seed=0):
    """Balanced random partition of ``n`` instances into ``r`` folds."""
    if r < 2:
        raise ValueError("r must be >= 2")
    if n < r:
        raise ValueError(f"cannot split {n} instances into {r} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.empty(n, dtype=np.int64)
    folds[perm] = np.arange(n) % r
    return InnerFolding(r, folds, seed)


def run_inner_round(train_images, test_images, cae_cfg, clu_cfg, fold=0):
    """Train CAE-MLE on the inner-train images and embed the inner-test ones."""
    model = build_cae(cae_cfg)
    pretrain(model, train_images)
    res = train_cae_mle(model, train_images, clu_cfg)
    z_test = model.encode(test_images)
    return RoundResult(fold, model, res.labels, res.sizes, res.centroids, z_test)


def extract_error_features(z, sizes, centroids):
    """Error-representation features of one latent vector or a matrix of them.

    ``z`` may be one d-vector or an (m, d) matrix; the result is (s + 2,) or
    (m, s + 2) accordingly. Ties for the closest centroid go to the lowest index.
    """
    z = np.asarray(z, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    mu = np.atleast_2d(np.asarray(centroids, dtype=np.float64))
    sizes = np.asarray(sizes, dtype=np.float64)
    if z.shape[1] != mu.shape[1]:
        raise ValueError(f"dimension mismatch: z has {z.shape[1]}, centroids have {mu.shape[1]}")
    if sizes.shape != (mu.shape[0],):
        raise ValueError(f"{sizes.shape[0]} cluster sizes for {mu.shape[0]} centroids")
    weights = np.sqrt(np.sum((z[:, None, :] - mu[None, :, :]) ** 2, axis=2))
    closest = np.argmin(weights, axis=1)
    confidence = sizes[closest] / sizes.sum()
    out = np.column_stack([confidence, weights, weights[np.arange(len(z)), closest]])
    return out[0] if single else out


def normalize_features(block, bound=FEATURE_RANGE):
    """Min-max map every column onto [-bound, bound]; constant columns become 0."""
    block = np.asarray(block, dtype=np.float64)
    lo = block.min(axis=0)
    hi = block.max(axis=0)
    span = hi - lo
    out = np.zeros_like(block)
    ok = span > 0
    out[:, ok] = (block[:, ok] - lo[ok]) / span[ok] * (2 * bound) - bound
    return out


def _round_configs(cae_cfg, clu_cfg, ifl_cfg, round_seed):
    frac = ifl_cfg.round_budget
    return (replace(cae_cfg, seed=round_seed, epochs=max(1, round(cae_cfg.epochs * frac))),
            replace(clu_cfg, seed=round_seed, max_iter=max(1, round(clu_cfg.max_iter * frac))))


def _round_task(args):
    images, folding, j, cae_cfg, clu_cfg, ifl_cfg, round_seed = args
    train_idx, test_idx = folding.split(j)
    rcae, rclu = _round_configs(cae_cfg, clu_cfg, ifl_cfg, round_seed)
    try:
        res = run_inner_round(images[train_idx], images[test_idx], rcae, rclu, fold=j)
    except Exception as exc:
        raise RuntimeError(f"inner round for fold {j} failed: {exc}") from exc
    log.info("fold %d/%d done", j + 1, folding.r)
    return res


def align_rounds(rounds, folding):
    """Renumber every round's clusters to agree with round 0.

    Cluster ids are arbitrary per round, so the weight columns would mean
    different clusters in different folds. Two rounds share all inner-train
    instances outside their two test folds; the permutation maximizing label
    agreement on that overlap relabels the round and reorders its per-cluster arrays.
    """
    ref = rounds[0]
    ref_train, _ = folding.split(ref.fold)
    ref_label = np.full(len(folding.folds), -1)
    ref_label[ref_train] = ref.train_labels
    s = len(ref.centroids)
    for res in rounds[1:]:
        train_idx, _ = folding.split(res.fold)
        shared = ref_label[train_idx] >= 0
        table = np.zeros((s, s), dtype=np.int64)
        np.add.at(table, (ref_label[train_idx][shared], res.train_labels[shared]), 1)
        rows, cols = linear_sum_assignment(table, maximize=True)
        new_id = np.empty(s, dtype=np.int64)
        new_id[cols] = rows
        res.train_labels = new_id[res.train_labels]
        perm = np.argsort(new_id)
        res.sizes = res.sizes[perm]
        res.centroids = res.centroids[perm]
    return rounds


def deep_ifl(images, cae_cfg, clu_cfg, ifl_cfg):
    """Featurize every instance out-of-fold, then run the final clustering.

    The final stage pretrains a fresh autoencoder on all images and runs
    CAE-MLE with the normalized feature block appended to the embedding.
    """
    images = np.asarray(images)
    n, s = images.shape[0], clu_cfg.n_clusters
    folding = inner_folds(n, ifl_cfg.r, ifl_cfg.seed)
    round_seeds = [int(ss.generate_state(1)[0])
                   for ss in np.random.SeedSequence(ifl_cfg.seed).spawn(ifl_cfg.r)]
    tasks = [(images, folding, j, cae_cfg, clu_cfg, ifl_cfg, round_seeds[j]) for j in range(ifl_cfg.r)]
    if ifl_cfg.workers > 1:
        with ProcessPoolExecutor(max_workers=ifl_cfg.workers) as pool:
            outputs = list(pool.map(_round_task, tasks))
    else:
        outputs = [_round_task(t) for t in tasks]
    rounds = align_rounds(sorted(outputs, key=lambda res: res.fold), folding)

    features = np.full((n, s + 2), np.nan)
    seen = np.zeros(n, dtype=np.int64)
    for res in rounds:
        _, test_idx = folding.split(res.fold)
        features[test_idx] = extract_error_features(res.z_test, res.sizes, res.centroids)
        seen[test_idx] += 1
    if not np.all(seen == 1):
        raise RuntimeError("inner folding did not featurize every instance exactly once")
    normalized = normalize_features(features)

    model = build_cae(replace(cae_cfg, seed=ifl_cfg.seed))
    pretrain(model, images)
    final = train_cae_mle(model, images, replace(clu_cfg, seed=ifl_cfg.seed), extra_features=normalized)
    return IflResult(final.labels, features, normalized, folding, final, rounds)


def write_features(path, features, folds):
    s = features.shape[1] - 2
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["instance_id", "fold_id", "confidence"]
                        + [f"w_{j + 1}" for j in range(s)] + ["w_closest"])
        for i, row in enumerate(features):
            writer.writerow([i, int(folds[i])] + [repr(float(v)) for v in row])


def read_features(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    body = np.array(rows[1:], dtype=np.float64)
    return body[:, 2:], body[:, 1].astype(np.int64), rows[0]
