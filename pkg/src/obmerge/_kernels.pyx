# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled merge kernels.

Hot per-element loops behind the merge pipelines. Must stay bit-identical
to ``_kernels_py``; the extension is built with -ffp-contract=off so the
float32 operation order matches the numpy backend exactly.
"""

from libc.stdint cimport int8_t, int64_t, uint8_t, uint64_t
from libc.stdlib cimport free, malloc, qsort

import numpy as np

BACKEND = "c"

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15UL
cdef double U53_SCALE = 1.0 / 9007199254740992.0  # 2**-53, exact


cdef inline uint64_t _mix64(uint64_t z) noexcept nogil:
    z ^= z >> 30
    z *= 0xBF58476D1CE4E5B9UL
    z ^= z >> 27
    z *= 0x94D049BB133111EBUL
    return z ^ (z >> 31)


def dare_keep_mask(unsigned long long stream_seed, Py_ssize_t n, double p):
    """Boolean keep mask for n entries of one SplitMix64 stream."""
    out = np.empty(n, dtype=np.uint8)
    cdef uint8_t[::1] mask = out
    cdef uint64_t seed = <uint64_t> stream_seed
    cdef uint64_t draw
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            draw = _mix64(seed + (<uint64_t> (i + 1)) * GOLDEN)
            mask[i] = 1 if (<double> (draw >> 11)) * U53_SCALE < p else 0
    return out.view(np.bool_)


cdef struct RankKey:
    float primary
    float secondary
    int64_t index


cdef int _rank_cmp(const void* pa, const void* pb) noexcept nogil:
    cdef const RankKey* a = <const RankKey*> pa
    cdef const RankKey* b = <const RankKey*> pb
    if a.primary > b.primary:
        return -1
    if a.primary < b.primary:
        return 1
    if a.secondary > b.secondary:
        return -1
    if a.secondary < b.secondary:
        return 1
    if a.index < b.index:
        return -1
    if a.index > b.index:
        return 1
    return 0


def rank_topk_mask(primary, secondary, Py_ssize_t k):
    """Mask of the k highest entries: primary desc, secondary desc, index asc."""
    cdef const float[::1] prim = np.ascontiguousarray(primary, dtype=np.float32)
    cdef Py_ssize_t n = prim.shape[0]
    out = np.zeros(n, dtype=np.uint8)
    cdef uint8_t[::1] mask = out
    if k <= 0 or n == 0:
        return out.view(np.bool_)
    if k > n:
        k = n
    cdef const float[::1] sec
    cdef bint has_sec = secondary is not None
    if has_sec:
        sec = np.ascontiguousarray(secondary, dtype=np.float32)
    cdef RankKey* keys = <RankKey*> malloc(n * sizeof(RankKey))
    if keys == NULL:
        raise MemoryError()
    cdef Py_ssize_t i
    try:
        with nogil:
            for i in range(n):
                keys[i].primary = prim[i]
                keys[i].secondary = sec[i] if has_sec else 0.0
                keys[i].index = i
            qsort(keys, n, sizeof(RankKey), _rank_cmp)
            for i in range(k):
                mask[keys[i].index] = 1
    finally:
        free(keys)
    return out.view(np.bool_)


def score_grid(h, delta):
    """Curvature-weighted squared deltas: 0.5 * (h * (delta * delta))."""
    arr = np.ascontiguousarray(delta, dtype=np.float32)
    flat = arr.reshape(1, -1) if arr.ndim == 1 else arr.reshape(arr.shape[0], -1)
    cdef Py_ssize_t rows = flat.shape[0]
    cdef Py_ssize_t cols = flat.shape[1]
    hv = np.ascontiguousarray(np.broadcast_to(np.asarray(h, dtype=np.float32), (cols,)))
    out = np.empty((rows, cols), dtype=np.float32)
    cdef const float[:, ::1] dm = flat
    cdef float[:, ::1] om = out
    cdef const float[::1] hm = hv
    cdef Py_ssize_t r, j
    cdef float d
    cdef float half = 0.5
    with nogil:
        for r in range(rows):
            for j in range(cols):
                d = dm[r, j]
                om[r, j] = half * (hm[j] * (d * d))
    return out.reshape(arr.shape)


def elect_signs_stack(deltas, weights):
    """Per-coordinate consensus sign over a (donors, n) stack.

    Donor-outer passes over contiguous rows keep this memory-friendly;
    the arithmetic order per coordinate matches the numpy backend.
    """
    cdef const float[:, ::1] dm = np.ascontiguousarray(deltas, dtype=np.float32)
    cdef const float[:, ::1] wm = np.ascontiguousarray(weights, dtype=np.float32)
    cdef Py_ssize_t donors = dm.shape[0]
    cdef Py_ssize_t n = dm.shape[1]
    out = np.empty(n, dtype=np.int8)
    cdef int8_t[::1] om = out
    wsum_arr = np.zeros(n, dtype=np.float32)
    cdef float[::1] wsum = wsum_arr
    cdef Py_ssize_t d, j, first, count
    cdef float eff, sgn, v, cand, wmax
    with nogil:
        for d in range(donors):
            for j in range(n):
                v = dm[d, j]
                sgn = (v > 0.0) - (v < 0.0)
                eff = wm[d, j] if v != 0.0 else 0.0
                wsum[j] += eff * sgn
        for j in range(n):
            if wsum[j] > 0.0:
                om[j] = 1
            elif wsum[j] < 0.0:
                om[j] = -1
            else:
                # exact cancellation: rescan this coordinate for the
                # unique largest-weight contributor (ties resolve to +)
                wmax = 0.0
                first = 0
                count = 0
                for d in range(donors):
                    v = dm[d, j]
                    eff = wm[d, j] if v != 0.0 else 0.0
                    if d == 0 or eff > wmax:
                        wmax = eff
                        first = d
                        count = 1
                    elif eff == wmax:
                        count += 1
                v = dm[first, j]
                cand = (v > 0.0) - (v < 0.0)
                if count == 1 and cand != 0.0:
                    om[j] = <int8_t> cand
                else:
                    om[j] = 1
    return out


def aggregate_stack(deltas, signs, lambdas, bint mean):
    """Combine lambda-scaled donor values whose sign matches the election."""
    cdef const float[:, ::1] dm = np.ascontiguousarray(deltas, dtype=np.float32)
    cdef const int8_t[::1] sm = np.ascontiguousarray(signs, dtype=np.int8)
    cdef const float[::1] lm = np.ascontiguousarray(lambdas, dtype=np.float32)
    cdef Py_ssize_t donors = dm.shape[0]
    cdef Py_ssize_t n = dm.shape[1]
    out = np.empty(n, dtype=np.float32)
    cdef float[::1] om = out
    cdef Py_ssize_t d, j
    cdef float acc, v, term
    cdef int sgn
    cdef int64_t count
    with nogil:
        for j in range(n):
            acc = 0.0
            count = 0
            for d in range(donors):
                v = dm[d, j]
                sgn = (v > 0.0) - (v < 0.0)
                if sgn == sm[j]:
                    term = lm[d] * v
                    acc += term
                    count += 1
            if mean:
                om[j] = acc / (<float> (count if count > 0 else 1))
            else:
                om[j] = acc
    return out
