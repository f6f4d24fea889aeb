# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the scoring and mask-selection inner loops."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def rank_auc(real, fake):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] r = np.ascontiguousarray(real, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] f = np.ascontiguousarray(fake, dtype=np.float64)
    cdef Py_ssize_t n_r = r.shape[0], n_f = f.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] allv = np.concatenate([r, f])
    cdef cnp.ndarray[cnp.int64_t, ndim=1] order = np.argsort(allv, kind="mergesort").astype(np.int64)
    cdef Py_ssize_t n = n_r + n_f, i = 0, j, k
    cdef double rank, total = 0.0
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ranks = np.empty(n, dtype=np.float64)
    while i < n:
        j = i
        while j + 1 < n and allv[order[j + 1]] == allv[order[i]]:
            j += 1
        rank = 0.5 * (i + j) + 1.0
        for k in range(i, j + 1):
            ranks[order[k]] = rank
        i = j + 1
    # summed in input order to match the numpy path bit for bit
    total = ranks[:n_r].sum()
    return float((total - n_r * (n_r + 1) / 2.0) / (n_r * n_f))


def eer_scan(real, fake):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] rs = np.sort(np.asarray(real, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fs = np.sort(np.asarray(fake, dtype=np.float64))
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.unique(np.concatenate([rs, fs]))
    cdef Py_ssize_t m = v.shape[0], n_r = rs.shape[0], n_f = fs.shape[0]
    cdef Py_ssize_t nt = m + 1, t, ir = 0, jf = 0, best = 0
    cdef cnp.ndarray[cnp.float64_t, ndim=1] thr = np.empty(nt, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fpr = np.empty(nt, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fnr = np.empty(nt, dtype=np.float64)
    cdef double th, gap, best_gap = INFINITY
    thr[0] = -INFINITY
    for t in range(1, m):
        thr[t] = v[t - 1] + (v[t] - v[t - 1]) / 2.0
    thr[nt - 1] = INFINITY
    for t in range(nt):
        th = thr[t]
        while ir < n_r and rs[ir] < th:
            ir += 1
        while jf < n_f and fs[jf] < th:
            jf += 1
        fnr[t] = (<double>ir) / n_r
        fpr[t] = (<double>(n_f - jf)) / n_f
        gap = fpr[t] - fnr[t]
        if gap < 0:
            gap = -gap
        if gap < best_gap:
            best_gap = gap
            best = t
    return thr, fpr, fnr, int(best)


def select_blocks(grad_map, Py_ssize_t n_blocks, Py_ssize_t block_size, Py_ssize_t suppress):
    cdef cnp.ndarray[cnp.float64_t, ndim=2] g = np.ascontiguousarray(grad_map, dtype=np.float64)
    cdef Py_ssize_t h = g.shape[0], w = g.shape[1]
    cdef cnp.ndarray[cnp.uint8_t, ndim=2] avail = np.ones((h, w), dtype=np.uint8)
    cdef cnp.ndarray[cnp.int64_t, ndim=2] peaks = np.zeros((n_blocks, 2), dtype=np.int64)
    cdef Py_ssize_t k, i, j, bi, bj, r0, r1, c0, c1, half = suppress // 2
    cdef double bv
    cdef bint found
    for k in range(n_blocks):
        found = False
        bv = -INFINITY
        bi = 0
        bj = 0
        for i in range(h):
            for j in range(w):
                if avail[i, j] and (not found or g[i, j] > bv):
                    bv = g[i, j]
                    bi = i
                    bj = j
                    found = True
        if not found:
            for i in range(h):
                for j in range(w):
                    if g[i, j] > bv:
                        bv = g[i, j]
                        bi = i
                        bj = j
        peaks[k, 0] = bi
        peaks[k, 1] = bj
        r0 = max(bi - half, 0)
        r1 = min(max(bi - half + suppress, 0), h)
        c0 = max(bj - half, 0)
        c1 = min(max(bj - half + suppress, 0), w)
        for i in range(r0, r1):
            for j in range(c0, c1):
                avail[i, j] = 0
    return peaks
