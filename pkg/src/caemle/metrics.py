"""Clustering accuracy (best one-to-one mapping) and normalized mutual information."""

import numpy as np
from scipy.optimize import linear_sum_assignment


def _check(y, c):
    y = np.asarray(y).ravel()
    c = np.asarray(c).ravel()
    if y.size == 0:
        raise ValueError("empty label arrays")
    if y.size != c.size:
        raise ValueError(f"length mismatch: {y.size} ground-truth vs {c.size} predicted labels")
    return y, c


def contingency(y, c):
    """Counts table with rows = predicted clusters, columns = classes."""
    y, c = _check(y, c)
    _, yi = np.unique(y, return_inverse=True)
    _, ci = np.unique(c, return_inverse=True)
    table = np.zeros((ci.max() + 1, yi.max() + 1), dtype=np.int64)
    np.add.at(table, (ci, yi), 1)
    return table


def acc(y, c):
    """Fraction of instances correct under the best one-to-one cluster->class map.

    When cluster and class counts differ the table is zero-padded square, so
    surplus clusters map to nothing and score zero.
    """
    table = contingency(y, c)
    k = max(table.shape)
    padded = np.zeros((k, k), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(padded, maximize=True)
    return padded[rows, cols].sum() / table.sum()


def _entropy(counts, n):
    p = counts[counts > 0] / n
    return float(-np.sum(p * np.log(p)))


def nmi(y, c):
    """I(Y, C) / mean(H(Y), H(C)), natural log; 0 when both entropies vanish."""
    table = contingency(y, c)
    n = table.sum()
    hy = _entropy(table.sum(axis=0), n)
    hc = _entropy(table.sum(axis=1), n)
    nz = table > 0
    pij = table[nz] / n
    pc = (table.sum(axis=1)[:, None] / n * np.ones_like(table))[nz]
    py = (table.sum(axis=0)[None, :] / n * np.ones_like(table))[nz]
    mi = float(np.sum(pij * np.log(pij / (pc * py))))
    denom = 0.5 * (hy + hc)
    if denom <= 0.0:
        return 0.0
    return min(max(mi / denom, 0.0), 1.0)
