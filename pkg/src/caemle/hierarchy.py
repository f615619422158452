"""Ward-linkage agglomerative clustering.

The merge search is a nearest-neighbour chain over cluster centroids. Ward's
Lance-Williams recurrence for squared Euclidean distance is equivalent to
keeping each merged cluster's size-weighted centroid, so no pairwise distance
matrix is cached: every cost is recomputed from (size, centroid) pairs. This
keeps extra memory at O(n*d) and time at O(n^2 * d).
"""

import csv
from dataclasses import dataclass

import numpy as np

from . import _backend


@dataclass
class Dendrogram:
    """Merge history sorted by cost.

    Row k merges clusters ``a[k]`` and ``b[k]`` (a < b) at ward cost ``cost[k]``
    into cluster ``n + k`` of ``size[k]`` members.
    """

    a: np.ndarray
    b: np.ndarray
    cost: np.ndarray
    size: np.ndarray
    n: int

    @property
    def new_id(self):
        return self.n + np.arange(len(self.a))

    def __len__(self):
        return len(self.a)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["a", "b", "cost", "new_id", "size"])
            for k in range(len(self.a)):
                writer.writerow([int(self.a[k]), int(self.b[k]), repr(float(self.cost[k])),
                                 self.n + k, int(self.size[k])])


@dataclass
class FlatClustering:
    labels: np.ndarray
    centroids: np.ndarray
    sizes: np.ndarray

    @property
    def n_clusters(self):
        return len(self.sizes)


def ward_delta(size_a, centroid_a, size_b, centroid_b):
    """Increase in within-cluster sum of squares caused by merging a and b."""
    ca = np.asarray(centroid_a, dtype=np.float64)
    cb = np.asarray(centroid_b, dtype=np.float64)
    if ca.shape != cb.shape:
        raise ValueError(f"centroid dimensions differ: {ca.shape} vs {cb.shape}")
    if size_a < 1 or size_b < 1:
        raise ValueError("cluster sizes must be >= 1")
    diff = ca - cb
    return float(size_a * size_b / (size_a + size_b) * np.dot(diff.ravel(), diff.ravel()))


def _sort_merges(n, ma, mb, mcost, msize):
    """Order raw NN-chain merges by cost and renumber the internal nodes.

    A merge's sort key is lifted to at least its children's keys so that a
    parent never precedes a child even when rounding makes its cost smaller.
    """
    m = len(ma)
    key = np.empty(m)
    for k in range(m):
        kk = mcost[k]
        for child in (ma[k], mb[k]):
            if child >= n:
                kk = max(kk, key[child - n])
        key[k] = kk
    order = np.argsort(key, kind="stable")
    remap = np.empty(m, dtype=np.int64)
    remap[order] = np.arange(m)

    def rename(c):
        return c if c < n else n + remap[c - n]

    a = np.array([rename(ma[k]) for k in order], dtype=np.int64)
    b = np.array([rename(mb[k]) for k in order], dtype=np.int64)
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    return Dendrogram(lo, hi, np.asarray(mcost)[order].astype(np.float64),
                      np.asarray(msize)[order].astype(np.int64), n)


def linkage(points):
    """Full ward dendrogram of ``points`` (n x d)."""
    x = np.ascontiguousarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    n = x.shape[0]
    if n == 0:
        raise ValueError("no points to cluster")
    ma, mb, mcost, msize = _backend.nn_chain_ward(x)
    return _sort_merges(n, ma, mb, mcost, msize)


def cut(dendrogram, s):
    """Flat labels after the first ``n - s`` merges.

    Labels are numbered by first appearance in point order.
    """
    n = dendrogram.n
    if not 1 <= s <= n:
        raise ValueError(f"cluster count {s} out of range [1, {n}]")
    parent = np.arange(2 * n - 1)

    def find(i):
        root = i
        while parent[root] != root:
            root = parent[root]
        while parent[i] != root:
            parent[i], i = root, parent[i]
        return root

    for k in range(n - s):
        new = n + k
        parent[find(int(dendrogram.a[k]))] = new
        parent[find(int(dendrogram.b[k]))] = new
    roots = np.array([find(i) for i in range(n)])
    _, first, inverse = np.unique(roots, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first)] = np.arange(len(first))
    return rank[inverse]


def centroids(points, labels, s=None):
    """Per-cluster means and sizes for dense labels in [0, s)."""
    x = np.asarray(points, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    s = int(labels.max()) + 1 if s is None else s
    sizes = np.bincount(labels, minlength=s)
    if np.any(sizes[:s] == 0):
        raise ValueError(f"empty cluster ids: {np.flatnonzero(sizes[:s] == 0).tolist()}")
    sums = np.zeros((s, x.shape[1]))
    np.add.at(sums, labels, x)
    return sums / sizes[:, None], sizes


def agglomerate(points, s, subsample=None, seed=0):
    """Cluster ``points`` into ``s`` groups with ward linkage.

    With ``subsample=m`` (m < n) only a uniform random subset of m points is
    agglomerated; the remaining points join their nearest subset centroid and
    centroids are recomputed over all members. Returns ``(FlatClustering,
    Dendrogram)``; the dendrogram covers the clustered points only.
    """
    x = np.ascontiguousarray(points, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"points must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    if not 1 <= s <= n:
        raise ValueError(f"need 1 <= s <= n, got s={s}, n={n}")
    if not np.all(np.isfinite(x)):
        raise ValueError("points contain non-finite values")
    if subsample is not None and subsample < n:
        if subsample < s:
            raise ValueError("subsample must be at least the cluster count")
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(n, size=subsample, replace=False))
        tree = linkage(x[pick])
        sub_mu, _ = centroids(x[pick], cut(tree, s), s)
        labels = nearest_centroid(x, sub_mu)
        labels[pick] = cut(tree, s)
        # subset points keep their tree labels, so no cluster ends up empty
        mu, sizes = centroids(x, labels, s)
        return FlatClustering(labels, mu, sizes), tree
    tree = linkage(x)
    labels = cut(tree, s)
    mu, sizes = centroids(x, labels, s)
    return FlatClustering(labels, mu, sizes), tree


def nearest_centroid(points, mu, chunk=4096):
    """Index of the closest centroid per point (ties to the lowest index)."""
    x = np.asarray(points, dtype=np.float64)
    mu = np.asarray(mu, dtype=np.float64)
    out = np.empty(x.shape[0], dtype=np.int64)
    mu_sq = np.einsum("ij,ij->i", mu, mu)
    for i in range(0, x.shape[0], chunk):
        blk = x[i:i + chunk]
        d = mu_sq[None, :] - 2.0 * blk @ mu.T
        out[i:i + chunk] = np.argmin(d, axis=1)
    return out
