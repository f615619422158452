# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_fallback``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def col2im(double[:, :, :, :, :, ::1] cols, tuple out_shape, tuple kernel, int stride):
    cdef Py_ssize_t n = cols.shape[0], c = cols.shape[1]
    cdef Py_ssize_t ho = cols.shape[2], wo = cols.shape[3]
    cdef Py_ssize_t kh = kernel[0], kw = kernel[1]
    out_np = np.zeros(out_shape, dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_np
    cdef Py_ssize_t b, ch, y, x, i, j, oy
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                oy = y * stride
                for x in range(wo):
                    for i in range(kh):
                        for j in range(kw):
                            out[b, ch, oy + i, x * stride + j] += cols[b, ch, y, x, i, j]
    return out_np


def nn_chain_ward(points):
    cdef double[:, ::1] x = np.array(points, dtype=np.float64, order="C")
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t m = n - 1 if n > 0 else 0
    ma_np = np.empty(m, dtype=np.int64)
    mb_np = np.empty(m, dtype=np.int64)
    mc_np = np.empty(m, dtype=np.float64)
    ms_np = np.empty(m, dtype=np.int64)
    if n < 2:
        return ma_np, mb_np, mc_np, ms_np
    cdef long long[::1] ma = ma_np, mb = mb_np, msize = ms_np
    cdef double[::1] mcost = mc_np
    cdef double[::1] size = np.ones(n, dtype=np.float64)
    cdef long long[::1] ident = np.arange(n, dtype=np.int64)
    cdef unsigned char[::1] active = np.ones(n, dtype=np.uint8)
    cdef long long[::1] chain = np.empty(n, dtype=np.int64)
    cdef Py_ssize_t top = 0, k = 0, a, b, prev, i, t, lo, hi, first = 0
    cdef double best, cost, diff, acc, na, nb
    while k < m:
        if top == 0:
            while not active[first]:
                first += 1
            chain[0] = first
            top = 1
        a = chain[top - 1]
        prev = chain[top - 2] if top > 1 else -1
        best = INFINITY
        b = -1
        for i in range(n):
            if i == a or not active[i]:
                continue
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - x[a, t]
                acc = acc + diff * diff
            cost = acc * (size[i] * size[a] / (size[i] + size[a]))
            if cost < best or (cost == best and b >= 0 and ident[i] < ident[b]):
                best = cost
                b = i
        if prev >= 0:
            acc = 0.0
            for t in range(d):
                diff = x[prev, t] - x[a, t]
                acc = acc + diff * diff
            cost = acc * (size[prev] * size[a] / (size[prev] + size[a]))
            if cost <= best:
                b = prev
        if b != prev:
            chain[top] = b
            top += 1
            continue
        top -= 2
        if ident[a] < ident[b]:
            lo = a
            hi = b
        else:
            lo = b
            hi = a
        ma[k] = ident[lo]
        mb[k] = ident[hi]
        mcost[k] = best
        na = size[a]
        nb = size[b]
        for t in range(d):
            x[lo, t] = (na * x[a, t] + nb * x[b, t]) / (na + nb)
        size[lo] = na + nb
        msize[k] = <long long>(na + nb)
        ident[lo] = n + k
        active[hi] = 0
        k += 1
    return ma_np, mb_np, mc_np, ms_np
