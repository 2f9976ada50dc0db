"""Numpy implementations of the compiled kernels.

Operation order matches ``_ckernels`` so both backends agree bit for bit.
"""

import numpy as np


def count_geq(values, offsets, groups, queries):
    """Count entries ``>= query`` in each query's group of a grouped sorted array.

    ``values[offsets[g]:offsets[g + 1]]`` holds group ``g`` in ascending order.
    """
    counts = np.empty(len(queries), dtype=np.int64)
    for g in np.unique(groups):
        sel = groups == g
        lo, hi = offsets[g], offsets[g + 1]
        counts[sel] = (hi - lo) - np.searchsorted(values[lo:hi], queries[sel], side="left")
    return counts


def level_argmin(weights, psi, neglogp, lam):
    n_classes = weights.shape[0]
    n_rows = psi.shape[0]
    if n_rows == 0:
        return np.zeros((n_classes, 0), dtype=np.int64), np.zeros(n_classes)
    cost = weights[None, :, :] * psi[:, None, :] + lam * neglogp
    labels = np.argmin(cost, axis=2)
    best = np.take_along_axis(cost, labels[:, :, None], axis=2)[:, :, 0]
    # cumsum accumulates sequentially, like the compiled loop
    totals = np.cumsum(best, axis=0)[-1]
    return np.ascontiguousarray(labels.T, dtype=np.int64), totals
