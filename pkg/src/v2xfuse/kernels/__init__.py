"""Kernel backend selection.

The compiled core is preferred when importable; the numpy fallback is
bit-for-bit equivalent (same accumulation order, same exactly rounded
reductions). Set V2XFUSE_BACKEND=c or V2XFUSE_BACKEND=py to force one;
forcing "c" raises if the extension is missing instead of silently
falling back.
"""

import os

_requested = os.environ.get("V2XFUSE_BACKEND", "").strip().lower()
if _requested not in ("", "c", "py"):
    raise ImportError(
        f"V2XFUSE_BACKEND must be 'c' or 'py', got {_requested!r}"
    )

if _requested == "py":
    from . import py as _impl

    BACKEND = "py"
else:
    try:
        from . import _core as _impl

        BACKEND = "c"
    except ImportError:
        if _requested == "c":
            raise
        from . import py as _impl

        BACKEND = "py"

import numpy as _np


def _c2(a):
    # Compiled kernels take C-contiguous f64 memoryviews; normalizing
    # here keeps both backends byte-identical on any input layout.
    return _np.ascontiguousarray(a, dtype=_np.float64)


def matmul(a, b):
    return _impl.matmul(_c2(a), _c2(b))


def row_sum(a):
    return _impl.row_sum(_c2(a))


def sum_all(a):
    return _impl.sum_all(_c2(a))


def attn_mix(p, v):
    return _impl.attn_mix(_c2(p), _c2(v))


matmul.__doc__ = _impl.matmul.__doc__
row_sum.__doc__ = _impl.row_sum.__doc__
sum_all.__doc__ = _impl.sum_all.__doc__
attn_mix.__doc__ = _impl.attn_mix.__doc__

__all__ = ["BACKEND", "matmul", "row_sum", "sum_all", "attn_mix"]
