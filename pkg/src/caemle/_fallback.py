"""Pure numpy versions of the hot kernels.

These are the reference implementations; ``_kernels.pyx`` mirrors them
loop-for-loop and must produce identical results.
"""

import numpy as np


def col2im(cols, out_shape, kernel, stride):
    """Scatter-add patch gradients back onto a padded image.

    ``cols`` has shape (N, C, Ho, Wo, kh, kw); ``out_shape`` is the padded
    (N, C, Hp, Wp) extent.
    """
    kh, kw = kernel
    n, c, ho, wo = cols.shape[:4]
    out = np.zeros(out_shape, dtype=cols.dtype)
    for i in range(kh):
        hi = i + stride * ho
        for j in range(kw):
            wj = j + stride * wo
            out[:, :, i:hi:stride, j:wj:stride] += cols[:, :, :, :, i, j]
    return out


def nn_chain_ward(points):
    """Ward agglomeration by nearest-neighbour chain.

    Works on centroids and sizes only (no distance matrix), so extra memory is
    O(n*d). Returns ``(a, b, cost, size)`` arrays in the order the merges were
    found; cluster ids follow the usual convention (leaves 0..n-1, the k-th
    emitted merge gets id n+k). Ties prefer the chain predecessor, then the
    smallest cluster id.
    """
    x = np.array(points, dtype=np.float64)
    n = x.shape[0]
    m = n - 1
    ma = np.empty(m, dtype=np.int64)
    mb = np.empty(m, dtype=np.int64)
    mcost = np.empty(m, dtype=np.float64)
    msize = np.empty(m, dtype=np.int64)
    if n < 2:
        return ma, mb, mcost, msize

    size = np.ones(n, dtype=np.float64)
    ident = np.arange(n, dtype=np.int64)  # slot -> current cluster id
    active = np.ones(n, dtype=bool)
    chain = []
    k = 0
    while k < m:
        if not chain:
            chain.append(int(np.flatnonzero(active)[0]))
        a = chain[-1]
        diff = x - x[a]
        cost = np.einsum("ij,ij->i", diff, diff)
        cost *= size * size[a] / (size + size[a])
        cost[~active] = np.inf
        cost[a] = np.inf
        best = cost.min()
        prev = chain[-2] if len(chain) > 1 else -1
        if prev >= 0 and cost[prev] <= best:
            b = prev
        else:
            cand = np.flatnonzero(cost == best)
            b = int(cand[np.argmin(ident[cand])])
        if b != prev:
            chain.append(b)
            continue
        chain.pop()
        chain.pop()
        lo, hi = (a, b) if ident[a] < ident[b] else (b, a)
        ma[k] = ident[lo]
        mb[k] = ident[hi]
        mcost[k] = best
        na, nb = size[a], size[b]
        x[lo] = (na * x[a] + nb * x[b]) / (na + nb)
        size[lo] = na + nb
        msize[k] = int(na + nb)
        ident[lo] = n + k
        active[hi] = False
        k += 1
    return ma, mb, mcost, msize
