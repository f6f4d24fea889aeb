"""Pure-Python/numpy versions of the compiled kernels in ``_kernels.pyx``.

Both implementations must return bit-identical results; the test suite runs
each against the other.
"""

import numpy as np


def rank_auc(real, fake):
    """P(real score > fake score) + 0.5 * P(tie), via midranks."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    n_r, n_f = len(real), len(fake)
    allv = np.concatenate([real, fake])
    order = np.argsort(allv, kind="mergesort")
    sv = allv[order]
    ranks = np.empty(len(allv), dtype=np.float64)
    i = 0
    n = len(sv)
    while i < n:
        j = i
        while j + 1 < n and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    u = ranks[:n_r].sum() - n_r * (n_r + 1) / 2.0
    return float(u / (n_r * n_f))


def candidate_thresholds(real, fake):
    v = np.unique(np.concatenate([np.asarray(real, float), np.asarray(fake, float)]))
    mids = v[:-1] + (v[1:] - v[:-1]) / 2.0
    return np.concatenate([[-np.inf], mids, [np.inf]])


def eer_scan(real, fake):
    """Scan candidate thresholds; a sample is called fake iff score < threshold.

    Returns ``(thresholds, fpr, fnr, best_index)`` with fpr the fraction of
    fakes called real and fnr the fraction of reals called fake.  The best
    index minimizes ``|fpr - fnr|``, lowest threshold on ties.
    """
    rs = np.sort(np.asarray(real, dtype=np.float64))
    fs = np.sort(np.asarray(fake, dtype=np.float64))
    thr = candidate_thresholds(rs, fs)
    n_r, n_f = len(rs), len(fs)
    below_r = np.searchsorted(rs, thr, side="left")
    below_f = np.searchsorted(fs, thr, side="left")
    fnr = below_r / n_r
    fpr = (n_f - below_f) / n_f
    gap = np.abs(fpr - fnr)
    best = int(np.argmin(gap))
    return thr, fpr, fnr, best


def select_blocks(grad_map, n_blocks, block_size, suppress):
    """Greedy peak picking with square suppression windows.

    Returns an ``(n_blocks, 2)`` int array of peak (row, col).  Ties go to the
    first location in row-major order.  Suppressed locations are excluded from
    later picks; if everything is excluded the remaining peaks are taken from
    the unsuppressed map.
    """
    g = np.array(grad_map, dtype=np.float64, copy=True)
    h, w = g.shape
    avail = np.ones((h, w), dtype=bool)
    peaks = np.zeros((n_blocks, 2), dtype=np.int64)
    half = suppress // 2
    for k in range(n_blocks):
        if avail.any():
            masked = np.where(avail, g, -np.inf)
            flat = int(np.argmax(masked))
        else:
            flat = int(np.argmax(grad_map))
        r, c = divmod(flat, w)
        peaks[k] = (r, c)
        avail[max(r - half, 0) : max(r - half + suppress, 0), max(c - half, 0) : max(c - half + suppress, 0)] = False
    return peaks
