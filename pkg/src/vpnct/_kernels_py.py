"""NumPy fallback for the compiled kernels (same signatures, same results)."""

from __future__ import annotations

import numpy as np

MODE_NOCHECK = 0
MODE_INWINDOW = 1
MODE_STRICT = 2

_BLOCK = 1 << 15


def rst_next_hit(start, stride, lo, hi, expected, window, mode):
    if lo >= hi:
        return hi
    if mode == MODE_NOCHECK:
        return lo
    expected = np.uint64(expected & 0xFFFFFFFF)
    for b in range(lo, hi, _BLOCK):
        idx = np.arange(b, min(b + _BLOCK, hi), dtype=np.uint64)
        seqs = (np.uint64(start) + idx * np.uint64(stride)) & np.uint64(0xFFFFFFFF)
        if mode == MODE_INWINDOW:
            d = (seqs - expected) & np.uint64(0xFFFFFFFF)
            d = np.minimum(d, np.uint64(1 << 32) - d)
            hits = np.flatnonzero(d < np.uint64(window))
        else:
            hits = np.flatnonzero(seqs == expected)
        if hits.size:
            return b + int(hits[0])
    return hi


def first_match(values, lo, hi, target):
    if lo >= hi:
        return hi
    hits = np.flatnonzero(np.asarray(values[lo:hi]) == target)
    return lo + int(hits[0]) if hits.size else hi


def pick_free(occupied, lo, hi, u):
    free = np.flatnonzero(np.asarray(occupied[lo:hi + 1]) == 0)
    if free.size == 0:
        return -1
    k = min(int(u * free.size), free.size - 1)
    return lo + int(free[k])


def count_free(occupied, lo, hi):
    return int(np.count_nonzero(np.asarray(occupied[lo:hi + 1]) == 0))
