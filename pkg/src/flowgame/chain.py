"""Max-sum dynamic programming over a chain of discrete delay levels.

Both players optimise objectives of the form

    sum_i T_i(k_{i+1} - k_i),    k_i in {0, ..., K-1}

where the pairwise term depends only on the level difference (the grid
is uniform). ``terms[..., i, d + K - 1]`` holds ``T_i(d)``.
"""
from __future__ import annotations

import numpy as np
from numba import njit


def difference_offsets(levels: int) -> np.ndarray:
    """Level differences -(K-1)..(K-1), the last axis of a terms array."""
    return np.arange(-(levels - 1), levels)


def chain_argmax(terms: np.ndarray, levels: int):
    """Maximise a chain objective for a batch of independent problems.

    ``terms`` has shape (B, L, 2K-1) or (L, 2K-1). Returns ``(path, value)``
    with ``path`` of shape (B, L+1) (or (L+1,)) of level indices. Ties go
    to the smallest level: the last level first, then each predecessor.
    Values are accumulated left to right starting from 0.0.
    """
    terms = np.ascontiguousarray(terms, dtype=np.float64)
    single = terms.ndim == 2
    if single:
        terms = terms[None]
    batch, length, width = terms.shape
    if width != 2 * levels - 1:
        raise ValueError("terms width must be 2*levels - 1")
    path = np.empty((batch, length + 1), dtype=np.int64)
    value = np.empty(batch)
    _solve(terms, levels, path, value)
    if single:
        return path[0], float(value[0])
    return path, value


@njit(cache=True)
def _solve(terms, levels, path, total):
    batch, length, _ = terms.shape
    value = np.empty(levels)
    nxt = np.empty(levels)
    back = np.empty((length, levels), np.int64)
    for b in range(batch):
        value[:] = 0.0
        for i in range(length):
            for k2 in range(levels):
                best = -np.inf
                arg = 0
                for k in range(levels):
                    v = value[k] + terms[b, i, k2 - k + levels - 1]
                    if v > best:
                        best = v
                        arg = k
                nxt[k2] = best
                back[i, k2] = arg
            value[:] = nxt
        last = 0
        for k in range(1, levels):
            if value[k] > value[last]:
                last = k
        path[b, length] = last
        total[b] = value[last]
        for i in range(length - 1, -1, -1):
            path[b, i] = back[i, path[b, i + 1]]


def path_value(terms: np.ndarray, path) -> float:
    """Objective of one level path, summed in DP order."""
    levels = (terms.shape[-1] + 1) // 2
    total = 0.0
    for i in range(len(path) - 1):
        total += terms[i, path[i + 1] - path[i] + levels - 1]
    return float(total)
