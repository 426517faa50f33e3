"""Reverse-mode autodiff over 2-D float64 matrices.

A GradientTape records every op output in execution order; backward()
replays the list in reverse, so gradient accumulation order is pinned
and runs are bitwise reproducible. Values are immutable by convention:
ops never write into an input array.

Matrix products go through the kernel backend (ascending-k
accumulation); row/total reductions are exactly rounded. Elementwise
transcendentals are plain numpy in every configuration. Scalars are
(1,1) matrices throughout.

Parameters are registered on the tape under (block, attr) keys so an
optimizer or a finite-difference checker can address every coordinate.
"""

import numpy as np

from . import kernels


class NumericError(ArithmeticError):
    """Raised when a computation that must stay finite does not."""


def _as_value(x):
    v = np.ascontiguousarray(x, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {v.shape}")
    return v


class Var:
    """One tape node: a value, its parents, and a backward closure."""

    __slots__ = ("value", "grad", "_parents", "_backward", "_tape")

    def __init__(self, value, tape=None, parents=(), backward=None):
        self.value = _as_value(value)
        self.grad = None
        self._parents = parents
        self._backward = backward
        self._tape = tape
        if tape is not None:
            tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def _accumulate(self, g):
        self.grad = g if self.grad is None else self.grad + g

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return smul(self, float(other))

    __rmul__ = __mul__

    def __repr__(self):
        return f"Var(shape={self.value.shape}, tape={self._tape is not None})"


class GradientTape:
    """Execution-ordered op record plus a parameter registry."""

    def __init__(self):
        self.nodes = []
        self.params = {}

    def param(self, key, value):
        """Register (or fetch) the parameter Var for (block, attr) `key`.

        Repeated registration under one key returns the same Var, so a
        block called twice shares one gradient accumulator.
        """
        if key in self.params:
            return self.params[key]
        v = Var(value, tape=self)
        self.params[key] = v
        return v

    def backward(self, loss):
        """Accumulate gradients of a (1,1) loss into every tape node."""
        if loss._tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.shape != (1, 1):
            raise ValueError("loss must be a (1,1) matrix")
        if not np.isfinite(loss.value[0, 0]):
            raise NumericError("non-finite loss")
        loss.grad = np.ones((1, 1), dtype=np.float64)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)

    def grads(self):
        """Parameter gradients keyed like the registry; zeros if unused."""
        out = {}
        for key, v in self.params.items():
            g = v.grad if v.grad is not None else np.zeros_like(v.value)
            out[key] = g
        return out


def const(x):
    """A constant (untaped, gradient-free) matrix."""
    return Var(x, tape=None)


def param_or_const(tape, key, value):
    """Register value under key when taping, else wrap it as a constant."""
    if tape is None:
        return const(value)
    return tape.param(key, value)


def _tape_of(*vars_):
    tape = None
    for v in vars_:
        if v._tape is not None:
            if tape is not None and tape is not v._tape:
                raise ValueError("inputs come from different tapes")
            tape = v._tape
    return tape


def _coerce(x):
    if isinstance(x, Var):
        return x
    v = np.asarray(x, dtype=np.float64)
    if v.ndim == 0:
        v = v.reshape(1, 1)
    return const(v)


def _reduce_to(g, shape):
    # Collapse a full-shape gradient onto a broadcast operand's shape.
    if g.shape == shape:
        return g
    if shape == (1, 1):
        return np.array([[kernels.sum_all(g)]])
    if shape[0] == 1:  # row vector: ascending-row column sums
        return kernels.matmul(np.ones((1, g.shape[0])), g)
    if shape[1] == 1:  # column vector: exact row sums
        return kernels.row_sum(g)
    raise ValueError(f"cannot reduce gradient {g.shape} to {shape}")


def _check_broadcast(a, b):
    sa, sb = a.value.shape, b.value.shape
    ok = sb == sa or sb == (1, 1) or (sb[0] == 1 and sb[1] == sa[1]) or (
        sb[1] == 1 and sb[0] == sa[0]
    )
    if not ok:
        raise ValueError(f"operand shape {sb} does not broadcast onto {sa}")


def add(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out = Var(a.value + b.value, tape=_tape_of(a, b), parents=(a, b))

    def backward(g):
        a._accumulate(g)
        b._accumulate(_reduce_to(g, b.value.shape))

    out._backward = backward
    return out


def sub(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    out = Var(a.value - b.value, tape=_tape_of(a, b), parents=(a, b))

    def backward(g):
        a._accumulate(g)
        b._accumulate(-_reduce_to(g, b.value.shape))

    out._backward = backward
    return out


def mul(a, b):
    """Elementwise product; b may be a row, column, or scalar broadcast."""
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    av, bv = a.value, b.value
    out = Var(av * bv, tape=_tape_of(a, b), parents=(a, b))

    def backward(g):
        a._accumulate(g * bv)
        b._accumulate(_reduce_to(g * av, bv.shape))

    out._backward = backward
    return out


def div(a, b):
    a, b = _coerce(a), _coerce(b)
    _check_broadcast(a, b)
    av, bv = a.value, b.value
    outv = av / bv
    out = Var(outv, tape=_tape_of(a, b), parents=(a, b))

    def backward(g):
        a._accumulate(g / bv)
        b._accumulate(_reduce_to(-(g * outv) / bv, bv.shape))

    out._backward = backward
    return out


def smul(a, c):
    a = _coerce(a)
    c = float(c)
    out = Var(a.value * c, tape=_tape_of(a), parents=(a,))

    def backward(g):
        a._accumulate(g * c)

    out._backward = backward
    return out


def neg(a):
    return smul(a, -1.0)


def relu(a):
    a = _coerce(a)
    mask = a.value > 0.0
    out = Var(np.where(mask, a.value, 0.0), tape=_tape_of(a), parents=(a,))

    def backward(g):
        a._accumulate(g * mask)

    out._backward = backward
    return out


def sigmoid(a):
    a = _coerce(a)
    av = a.value
    # Branch by sign so exp never overflows.
    yv = np.where(av >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(av))),
                  np.exp(-np.abs(av)) / (1.0 + np.exp(-np.abs(av))))
    out = Var(yv, tape=_tape_of(a), parents=(a,))

    def backward(g):
        a._accumulate(g * yv * (1.0 - yv))

    out._backward = backward
    return out


def softmax_rows(a):
    """Row-wise softmax; shifted by the row max, exact row-sum denominator."""
    a = _coerce(a)
    av = a.value
    e = np.exp(av - av.max(axis=1, keepdims=True))
    denom = kernels.row_sum(e)
    yv = e / denom
    out = Var(yv, tape=_tape_of(a), parents=(a,))

    def backward(g):
        inner = kernels.row_sum(yv * g)
        a._accumulate(yv * (g - inner))

    out._backward = backward
    return out


def matmul(a, b):
    a, b = _coerce(a), _coerce(b)
    out = Var(kernels.matmul(a.value, b.value), tape=_tape_of(a, b),
              parents=(a, b))

    def backward(g):
        a._accumulate(kernels.matmul(g, np.ascontiguousarray(b.value.T)))
        b._accumulate(kernels.matmul(np.ascontiguousarray(a.value.T), g))

    out._backward = backward
    return out


def attn_mix(p, v):
    """prob @ value with exactly rounded sums (key-order invariant)."""
    p, v = _coerce(p), _coerce(v)
    out = Var(kernels.attn_mix(p.value, v.value), tape=_tape_of(p, v),
              parents=(p, v))

    def backward(g):
        p._accumulate(kernels.matmul(g, np.ascontiguousarray(v.value.T)))
        v._accumulate(kernels.matmul(np.ascontiguousarray(p.value.T), g))

    out._backward = backward
    return out


def row_sum(a):
    a = _coerce(a)
    n_cols = a.value.shape[1]
    out = Var(kernels.row_sum(a.value), tape=_tape_of(a), parents=(a,))

    def backward(g):
        a._accumulate(np.repeat(g, n_cols, axis=1))

    out._backward = backward
    return out


def sum_all(a):
    a = _coerce(a)
    shape = a.value.shape
    out = Var(np.array([[kernels.sum_all(a.value)]]), tape=_tape_of(a),
              parents=(a,))

    def backward(g):
        a._accumulate(np.full(shape, g[0, 0]))

    out._backward = backward
    return out


def mean_all(a):
    a = _coerce(a)
    n = a.value.size
    if n == 0:
        raise ValueError("mean of an empty matrix")
    return smul(sum_all(a), 1.0 / n)


def transpose(a):
    a = _coerce(a)
    out = Var(np.ascontiguousarray(a.value.T), tape=_tape_of(a), parents=(a,))

    def backward(g):
        a._accumulate(np.ascontiguousarray(g.T))

    out._backward = backward
    return out


def reshape(a, rows, cols):
    a = _coerce(a)
    shape = a.value.shape
    out = Var(a.value.reshape(rows, cols), tape=_tape_of(a), parents=(a,))

    def backward(g):
        a._accumulate(g.reshape(shape))

    out._backward = backward
    return out


def concat_rows(parts):
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ValueError("concat_rows needs at least one part")
    vals = [p.value for p in parts]
    out = Var(np.concatenate(vals, axis=0), tape=_tape_of(*parts),
              parents=tuple(parts))
    offsets = np.cumsum([0] + [v.shape[0] for v in vals])

    def backward(g):
        for p, i0, i1 in zip(parts, offsets[:-1], offsets[1:]):
            if i1 > i0:
                p._accumulate(g[i0:i1])

    out._backward = backward
    return out


def concat_cols(parts):
    parts = [_coerce(p) for p in parts]
    if not parts:
        raise ValueError("concat_cols needs at least one part")
    vals = [p.value for p in parts]
    out = Var(np.concatenate(vals, axis=1), tape=_tape_of(*parts),
              parents=tuple(parts))
    offsets = np.cumsum([0] + [v.shape[1] for v in vals])

    def backward(g):
        for p, j0, j1 in zip(parts, offsets[:-1], offsets[1:]):
            if j1 > j0:
                p._accumulate(np.ascontiguousarray(g[:, j0:j1]))

    out._backward = backward
    return out


def slice_rows(a, i0, i1):
    a = _coerce(a)
    shape = a.value.shape
    out = Var(a.value[i0:i1].copy(), tape=_tape_of(a), parents=(a,))

    def backward(g):
        full = np.zeros(shape)
        full[i0:i1] = g
        a._accumulate(full)

    out._backward = backward
    return out


def slice_cols(a, j0, j1):
    a = _coerce(a)
    shape = a.value.shape
    out = Var(a.value[:, j0:j1].copy(), tape=_tape_of(a), parents=(a,))

    def backward(g):
        full = np.zeros(shape)
        full[:, j0:j1] = g
        a._accumulate(full)

    out._backward = backward
    return out


def gather_rows(a, idx):
    """Select rows by an int index array (repeats allowed)."""
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    shape = a.value.shape
    out = Var(a.value[idx].copy(), tape=_tape_of(a), parents=(a,))

    def backward(g):
        full = np.zeros(shape)
        np.add.at(full, idx, g)  # processes idx in order: deterministic
        a._accumulate(full)

    out._backward = backward
    return out


def scatter_rows(a, idx, n_rows):
    """Place a's rows at positions idx of an (n_rows, d) zero matrix.

    idx must not repeat; used to re-assemble per-expert outputs.
    """
    a = _coerce(a)
    idx = np.asarray(idx, dtype=np.intp)
    if len(np.unique(idx)) != len(idx):
        raise ValueError("scatter_rows: duplicate indices")
    outv = np.zeros((n_rows, a.value.shape[1]))
    outv[idx] = a.value
    out = Var(outv, tape=_tape_of(a), parents=(a,))

    def backward(g):
        a._accumulate(g[idx])

    out._backward = backward
    return out


def cumsum_rows(a):
    """Running prefix sums down the rows (ascending, sequential)."""
    a = _coerce(a)
    out = Var(np.cumsum(a.value, axis=0), tape=_tape_of(a), parents=(a,))

    def backward(g):
        rev = np.flip(np.cumsum(np.flip(g, axis=0), axis=0), axis=0)
        a._accumulate(np.ascontiguousarray(rev))

    out._backward = backward
    return out


def maximum(a, b):
    """Elementwise max of same-shape matrices; ties route gradient to a."""
    a, b = _coerce(a), _coerce(b)
    if a.value.shape != b.value.shape:
        raise ValueError("maximum: shapes differ")
    take_a = a.value >= b.value
    out = Var(np.where(take_a, a.value, b.value), tape=_tape_of(a, b),
              parents=(a, b))

    def backward(g):
        a._accumulate(g * take_a)
        b._accumulate(g * ~take_a)

    out._backward = backward
    return out


def bce_logits(z, targets):
    """Elementwise binary cross-entropy on logits (stable form)."""
    z = _coerce(z)
    y = np.asarray(targets, dtype=np.float64)
    zv = z.value
    outv = np.maximum(zv, 0.0) - zv * y + np.log1p(np.exp(-np.abs(zv)))
    out = Var(outv, tape=_tape_of(z), parents=(z,))

    def backward(g):
        s = np.where(zv >= 0.0, 1.0 / (1.0 + np.exp(-np.abs(zv))),
                     np.exp(-np.abs(zv)) / (1.0 + np.exp(-np.abs(zv))))
        z._accumulate(g * (s - y))

    out._backward = backward
    return out


def bce_probs(p, targets, eps=1e-12):
    """Elementwise binary cross-entropy on probabilities.

    Probabilities are clamped to [eps, 1-eps]; the gradient is zero on
    clamped cells (consistent subgradient of the clamped forward).
    """
    p = _coerce(p)
    y = np.asarray(targets, dtype=np.float64)
    pv = p.value
    pc = np.clip(pv, eps, 1.0 - eps)
    inside = (pv >= eps) & (pv <= 1.0 - eps)
    outv = -(y * np.log(pc) + (1.0 - y) * np.log1p(-pc))
    out = Var(outv, tape=_tape_of(p), parents=(p,))

    def backward(g):
        dp = ((1.0 - y) / (1.0 - pc) - y / pc) * inside
        p._accumulate(g * dp)

    out._backward = backward
    return out


def grad_check(f, params, x=None, eps=1e-5):
    """Max relative error of tape gradients vs central finite differences.

    f(tape, x) must build a (1,1) loss Var whose parameters are read
    live from the arrays in `params` (a dict keyed like the tape's
    parameter registry). Every coordinate of every array in `params` is
    perturbed by +/- eps; the relative error denominator is
    max(|analytic|, |numeric|, 1e-8).
    """
    if not 0.0 < eps <= 1e-3:
        raise ValueError("eps must lie in (0, 1e-3]")

    tape = GradientTape()
    loss = f(tape, x)
    if not np.isfinite(loss.value[0, 0]):
        raise NumericError("non-finite loss")
    tape.backward(loss)
    grads = tape.grads()
    for key in params:
        if key not in grads:
            raise KeyError(f"parameter {key!r} never registered on the tape")

    def loss_value():
        v = f(None, x).value[0, 0]
        if not np.isfinite(v):
            raise NumericError("non-finite loss during finite differences")
        return v

    worst = 0.0
    for key in sorted(params, key=repr):
        arr = params[key]
        g = grads[key]
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + eps
            lp = loss_value()
            flat[i] = saved - eps
            lm = loss_value()
            flat[i] = saved
            numeric = (lp - lm) / (2.0 * eps)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
