"""Pure-Python/numpy fallback kernels.

Bit-for-bit compatible with the compiled core: matmul replays the same
ascending-k addition sequence via rank-1 updates, and the reductions
use math.fsum, which is the same exactly-rounded summation the compiled
core implements.
"""

import math

import numpy as np


def matmul(a, b):
    """(m,k) @ (k,n) with ascending-k accumulation per element."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.shape[1] != b.shape[0]:
        raise ValueError("matmul: inner dimensions differ")
    m, kk = a.shape
    n = b.shape[1]
    c = np.zeros((m, n), dtype=np.float64)
    # Rank-1 updates in ascending k: each c[i,j] sees the identical
    # fl(c + fl(a_ik * b_kj)) sequence as the compiled triple loop.
    for k in range(kk):
        c += a[:, k : k + 1] * b[k : k + 1, :]
    return c


def row_sum(a):
    """(m,n) -> (m,1) exactly rounded row sums."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    out = np.empty((a.shape[0], 1), dtype=np.float64)
    rows = a.tolist()
    for i, row in enumerate(rows):
        out[i, 0] = math.fsum(row)
    return out


def sum_all(a):
    """Exactly rounded sum of every entry; returns a Python float."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    return math.fsum(a.ravel().tolist())


def attn_mix(p, v):
    """(m,n) @ (n,d) with exactly rounded per-element sums."""
    p = np.ascontiguousarray(p, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if p.shape[1] != v.shape[0]:
        raise ValueError("attn_mix: inner dimensions differ")
    m = p.shape[0]
    d = v.shape[1]
    out = np.empty((m, d), dtype=np.float64)
    for i in range(m):
        prod = p[i, :, None] * v  # (n,d), same rounded products as C
        cols = prod.T.tolist()
        for c in range(d):
            out[i, c] = math.fsum(cols[c])
    return out
