# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops. Semantics must match ``_kernels_py`` exactly."""

from libc.stdint cimport uint8_t, uint32_t, uint64_t, int64_t
from libc.string cimport memcpy

cdef enum:
    MODE_NOCHECK = 0
    MODE_INWINDOW = 1
    MODE_STRICT = 2


cdef inline uint32_t _dist(uint32_t a, uint32_t b) noexcept nogil:
    cdef uint32_t d = a - b
    cdef uint32_t e = b - a
    return d if d < e else e


cdef int64_t _rst_scan(uint32_t seq, uint32_t stride, int64_t lo, int64_t hi,
                       uint32_t expected, uint64_t window, int mode) noexcept nogil:
    cdef int64_t i
    if mode == MODE_INWINDOW:
        if window > <uint64_t>2147483648:
            return lo
        for i in range(lo, hi):
            if _dist(seq, expected) < window:
                return i
            seq = seq + stride
    else:
        for i in range(lo, hi):
            if seq == expected:
                return i
            seq = seq + stride
    return hi


def rst_next_hit(uint64_t start, uint64_t stride, int64_t lo, int64_t hi,
                 uint64_t expected, uint64_t window, int mode):
    cdef int64_t r
    cdef uint32_t seq
    if lo >= hi:
        return hi
    if mode == MODE_NOCHECK:
        return lo
    seq = <uint32_t>((start + <uint64_t>lo * stride) & 0xFFFFFFFF)
    with nogil:
        r = _rst_scan(seq, <uint32_t>stride, lo, hi, <uint32_t>expected, window, mode)
    return r


cdef int64_t _first(const uint32_t[:] values, int64_t lo, int64_t hi, uint32_t t) noexcept nogil:
    cdef int64_t i
    for i in range(lo, hi):
        if values[i] == t:
            return i
    return hi


def first_match(const uint32_t[:] values, int64_t lo, int64_t hi, uint64_t target):
    cdef int64_t r
    if lo >= hi:
        return hi
    with nogil:
        r = _first(values, lo, hi, <uint32_t>target)
    return r


cdef inline uint64_t _word(const uint8_t* p) noexcept nogil:
    cdef uint64_t w
    memcpy(&w, p, 8)
    return w


cdef inline int64_t _ones(uint64_t w) noexcept nogil:
    # Bytes are 0 or 1, so one multiply sums all eight into the top byte.
    return <int64_t>((w * <uint64_t>0x0101010101010101) >> 56)


cdef int64_t _count(const uint8_t* occ, int64_t lo, int64_t hi) noexcept nogil:
    cdef int64_t i = lo, used = 0
    while i + 8 <= hi + 1:
        used += _ones(_word(occ + i))
        i += 8
    while i <= hi:
        used += occ[i] != 0
        i += 1
    return (hi - lo + 1) - used


cdef int64_t _kth(const uint8_t* occ, int64_t lo, int64_t hi, int64_t k) noexcept nogil:
    cdef int64_t i = lo, free
    # Skip whole words while the k-th free port lies beyond them.
    while i + 8 <= hi + 1:
        free = 8 - _ones(_word(occ + i))
        if free > k:
            break
        k -= free
        i += 8
    while i <= hi:
        if occ[i] == 0:
            if k == 0:
                return i
            k -= 1
        i += 1
    return -1


def pick_free(const uint8_t[::1] occupied, int64_t lo, int64_t hi, double u):
    cdef int64_t count, k, r
    cdef const uint8_t* occ = &occupied[0]
    with nogil:
        count = _count(occ, lo, hi)
    if count == 0:
        return -1
    k = <int64_t>(u * count)
    if k >= count:
        k = count - 1
    with nogil:
        r = _kth(occ, lo, hi, k)
    return r


def count_free(const uint8_t[::1] occupied, int64_t lo, int64_t hi):
    cdef int64_t r
    cdef const uint8_t* occ = &occupied[0]
    with nogil:
        r = _count(occ, lo, hi)
    return r
