# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled f64 kernels with pinned rounding behaviour.

Accumulation contracts (must match kernels.py bit for bit):
  * matmul: ascending-k accumulation per output element. Compiled with
    -ffp-contract=off so no FMA contraction changes the rounding.
  * row_sum / sum_all / attn_mix: exactly rounded (Shewchuk) summation,
    same algorithm as math.fsum, so the result is the correctly rounded
    value of the exact sum and therefore independent of term order.

Transcendentals (exp, log, ...) are deliberately absent: those stay in
numpy in both backends so SIMD/libm differences can never split them.
"""

from libc.math cimport fabs

import numpy as np

cimport numpy as cnp

cnp.import_array()

# Nonzero, non-overlapping partials of finite doubles span at most
# ~2098/53 exponent windows; 128 slots is far beyond reachable.
DEF MAX_PARTIALS = 128


cdef inline Py_ssize_t _fsum_step(double x, double *p, Py_ssize_t n) noexcept nogil:
    # Fold one addend into the partials list (math.fsum inner loop).
    cdef Py_ssize_t i = 0, j
    cdef double y, hi, yr, lo, t
    for j in range(n):
        y = p[j]
        if fabs(x) < fabs(y):
            t = x
            x = y
            y = t
        hi = x + y
        yr = hi - x
        lo = y - yr
        if lo != 0.0:
            p[i] = lo
            i += 1
        x = hi
    if x != 0.0:
        p[i] = x
        i += 1
    return i


cdef inline double _fsum_final(double *p, Py_ssize_t n) noexcept nogil:
    # Correctly rounded total of the partials (math.fsum final loop),
    # including the half-even correction across multiple partials.
    cdef double hi = 0.0, x, y, yr, lo = 0.0
    if n > 0:
        n -= 1
        hi = p[n]
        while n > 0:
            x = hi
            n -= 1
            y = p[n]
            hi = x + y
            yr = hi - x
            lo = y - yr
            if lo != 0.0:
                break
        if n > 0 and ((lo < 0.0 and p[n - 1] < 0.0) or
                      (lo > 0.0 and p[n - 1] > 0.0)):
            y = lo * 2.0
            x = hi + y
            yr = x - hi
            if y == yr:
                hi = x
    return hi


def matmul(double[:, ::1] a, double[:, ::1] b):
    """(m,k) @ (k,n) with ascending-k accumulation per element."""
    cdef Py_ssize_t m = a.shape[0], kk = a.shape[1], n = b.shape[1]
    if b.shape[0] != kk:
        raise ValueError("matmul: inner dimensions differ")
    out = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] c = out
    cdef Py_ssize_t i, j, k
    cdef double aik
    with nogil:
        for i in range(m):
            for k in range(kk):
                aik = a[i, k]
                for j in range(n):
                    c[i, j] = c[i, j] + aik * b[k, j]
    return out


def row_sum(double[:, ::1] a):
    """(m,n) -> (m,1) exactly rounded row sums."""
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    out = np.empty((m, 1), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double partials[MAX_PARTIALS]
    cdef Py_ssize_t i, j, np_
    with nogil:
        for i in range(m):
            np_ = 0
            for j in range(n):
                np_ = _fsum_step(a[i, j], partials, np_)
            o[i, 0] = _fsum_final(partials, np_)
    return out


def sum_all(double[:, ::1] a):
    """Exactly rounded sum of every entry; returns a Python float."""
    cdef Py_ssize_t m = a.shape[0], n = a.shape[1]
    cdef double partials[MAX_PARTIALS]
    cdef Py_ssize_t i, j, np_ = 0
    with nogil:
        for i in range(m):
            for j in range(n):
                np_ = _fsum_step(a[i, j], partials, np_)
    return _fsum_final(partials, np_)


def attn_mix(double[:, ::1] p, double[:, ::1] v):
    """(m,n) @ (n,d) where every output element is an exactly rounded
    sum of the n products. Used for prob @ value so attention output is
    invariant to key ordering."""
    cdef Py_ssize_t m = p.shape[0], n = p.shape[1], d = v.shape[1]
    if v.shape[0] != n:
        raise ValueError("attn_mix: inner dimensions differ")
    out = np.empty((m, d), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef double partials[MAX_PARTIALS]
    cdef Py_ssize_t i, j, c, np_
    with nogil:
        for i in range(m):
            for c in range(d):
                np_ = 0
                for j in range(n):
                    np_ = _fsum_step(p[i, j] * v[j, c], partials, np_)
                o[i, c] = _fsum_final(partials, np_)
    return out
