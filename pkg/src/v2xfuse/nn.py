"""Differentiable building blocks: perceptron and multi-head attention.

Blocks are plain containers of named float64 arrays. A block instance
owns its parameter arrays; forward functions wrap them onto whatever
tape is active (or as constants when untaped), so one set of arrays
serves training, evaluation, and finite-difference perturbation alike.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import param_or_const


def _coerce(x):
    return x if isinstance(x, ad.Var) else ad.const(x)


class PerceptronBlock:
    """Two-layer feed-forward map with a max(0, .) nonlinearity.

    Rows of the input are processed independently:
    out = relu(x @ w1 + b1) @ w2 + b2.
    """

    def __init__(self, name, w1, b1, w2, b2):
        self.name = name
        self.w1 = np.ascontiguousarray(w1, dtype=np.float64)
        self.b1 = np.ascontiguousarray(b1, dtype=np.float64).reshape(1, -1)
        self.w2 = np.ascontiguousarray(w2, dtype=np.float64)
        self.b2 = np.ascontiguousarray(b2, dtype=np.float64).reshape(1, -1)
        if self.w1.shape[1] != self.b1.shape[1]:
            raise ValueError("hidden bias does not match w1")
        if self.w1.shape[1] != self.w2.shape[0]:
            raise ValueError("w2 does not match hidden dim")
        if self.w2.shape[1] != self.b2.shape[1]:
            raise ValueError("output bias does not match w2")

    @property
    def d_in(self):
        return self.w1.shape[0]

    @property
    def d_out(self):
        return self.w2.shape[1]

    @staticmethod
    def create(name, d_in, d_hidden, d_out, rng, scale=1.0):
        # 1/sqrt(fan-in) keeps activations O(1) at any width.
        w1 = rng.normal(0.0, scale / np.sqrt(d_in), (d_in, d_hidden))
        w2 = rng.normal(0.0, scale / np.sqrt(d_hidden), (d_hidden, d_out))
        return PerceptronBlock(name, w1, np.zeros((1, d_hidden)), w2,
                               np.zeros((1, d_out)))

    def params(self):
        return {
            (self.name, "w1"): self.w1,
            (self.name, "b1"): self.b1,
            (self.name, "w2"): self.w2,
            (self.name, "b2"): self.b2,
        }

    def _wrap(self, tape):
        return {attr: param_or_const(tape, (self.name, attr), arr)
                for (_, attr), arr in self.params().items()}


def perceptron_forward(block, x, tape=None):
    """Apply the two-layer map row-wise; x is (n, d_in)."""
    x = _coerce(x)
    if x.value.shape[1] != block.d_in:
        raise ValueError(
            f"{block.name}: input has {x.value.shape[1]} cols, "
            f"expected {block.d_in}")
    p = block._wrap(tape)
    h = ad.relu(ad.add(ad.matmul(x, p["w1"]), p["b1"]))
    return ad.add(ad.matmul(h, p["w2"]), p["b2"])


class AttentionBlock:
    """Projection weights for multi-head attention over model-dim tokens."""

    def __init__(self, name, heads, wq, wk, wv, wo):
        self.name = name
        self.heads = int(heads)
        self.wq = np.ascontiguousarray(wq, dtype=np.float64)
        self.wk = np.ascontiguousarray(wk, dtype=np.float64)
        self.wv = np.ascontiguousarray(wv, dtype=np.float64)
        self.wo = np.ascontiguousarray(wo, dtype=np.float64)
        d = self.wq.shape[0]
        for w in (self.wq, self.wk, self.wv, self.wo):
            if w.shape != (d, d):
                raise ValueError("projection weights must be square and equal")
        if self.heads < 1 or d % self.heads != 0:
            raise ValueError("model dim must be divisible by head count")

    @property
    def d_model(self):
        return self.wq.shape[0]

    @staticmethod
    def create(name, d_model, heads, rng, scale=1.0, qk_gain=1.0):
        # qk_gain > 1 widens only the query/key projections so the
        # softmax starts peaked instead of near-uniform. Stacks without
        # skip connections need this: uniform attention averages the
        # tokens together and every later layer sees one blurred row.
        s = scale / np.sqrt(d_model)
        return AttentionBlock(
            name, heads,
            rng.normal(0.0, s * qk_gain, (d_model, d_model)),
            rng.normal(0.0, s * qk_gain, (d_model, d_model)),
            rng.normal(0.0, s, (d_model, d_model)),
            rng.normal(0.0, s, (d_model, d_model)),
        )

    def params(self):
        return {
            (self.name, "wq"): self.wq,
            (self.name, "wk"): self.wk,
            (self.name, "wv"): self.wv,
            (self.name, "wo"): self.wo,
        }

    def _wrap(self, tape):
        return {attr: param_or_const(tape, (self.name, attr), arr)
                for (_, attr), arr in self.params().items()}


def mhca(block, queries, context, tape=None):
    """Multi-head cross attention: queries attend over context rows.

    Scaling is 1/sqrt(d_head). The prob @ value contraction uses the
    exactly rounded kernel, so reordering context rows cannot change
    any output bit.
    """
    q_in = _coerce(queries)
    c_in = _coerce(context)
    d = block.d_model
    if q_in.value.shape[1] != d or c_in.value.shape[1] != d:
        raise ValueError(f"{block.name}: token width must be {d}")
    if q_in.value.shape[0] == 0:
        return ad.const(np.zeros((0, d)))
    if c_in.value.shape[0] == 0:
        raise ValueError(f"{block.name}: attention over an empty context")
    p = block._wrap(tape)
    q = ad.matmul(q_in, p["wq"])
    k = ad.matmul(c_in, p["wk"])
    v = ad.matmul(c_in, p["wv"])
    dh = d // block.heads
    scale = 1.0 / np.sqrt(dh)
    mixed = []
    for h in range(block.heads):
        j0, j1 = h * dh, (h + 1) * dh
        qh = ad.slice_cols(q, j0, j1)
        kh = ad.slice_cols(k, j0, j1)
        vh = ad.slice_cols(v, j0, j1)
        scores = ad.smul(ad.matmul(qh, ad.transpose(kh)), scale)
        probs = ad.softmax_rows(scores)
        mixed.append(ad.attn_mix(probs, vh))
    return ad.matmul(ad.concat_cols(mixed), p["wo"])


def mhsa(block, tokens, tape=None):
    """Multi-head self attention; row-permutation equivariant bit for bit."""
    return mhca(block, tokens, tokens, tape=tape)


def attention_maps(block, queries, context):
    """Per-head attention probability maps (values only, for inspection)."""
    q_in = _coerce(queries).value
    c_in = _coerce(context).value
    p = {attr: arr for (_, attr), arr in block.params().items()}
    from . import kernels

    q = kernels.matmul(q_in, p["wq"])
    k = kernels.matmul(c_in, p["wk"])
    dh = block.d_model // block.heads
    maps = []
    for h in range(block.heads):
        j0, j1 = h * dh, (h + 1) * dh
        s = kernels.matmul(q[:, j0:j1], np.ascontiguousarray(k[:, j0:j1].T))
        maps.append(ad.softmax_rows(ad.const(s * (1.0 / np.sqrt(dh)))).value)
    return maps
