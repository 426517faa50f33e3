"""Perceptron and attention blocks vs straight-line reference math."""

import numpy as np
import pytest

from v2xfuse import autodiff as ad
from v2xfuse.nn import (AttentionBlock, PerceptronBlock, attention_maps,
                        mhca, mhsa, perceptron_forward)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def ref_perceptron(block, x):
    # Independent straight-line evaluation with plain numpy matmul.
    h = np.maximum(x @ block.w1 + block.b1, 0.0)
    return h @ block.w2 + block.b2


def ref_attention(block, q_in, c_in):
    # Brute-force head-by-head attention, plain numpy throughout.
    d = block.d_model
    dh = d // block.heads
    q = q_in @ block.wq
    k = c_in @ block.wk
    v = c_in @ block.wv
    outs = []
    for h in range(block.heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, axis=1) @ block.wo


def test_perceptron_zero_weights_returns_bias():
    b = PerceptronBlock("p", np.zeros((3, 4)), np.zeros((1, 4)),
                        np.zeros((4, 2)), np.array([[0.7, -1.2]]))
    out = perceptron_forward(b, np.ones((5, 3))).value
    assert np.array_equal(out, np.tile([[0.7, -1.2]], (5, 1)))


def test_perceptron_relu_kills_negative_path():
    # 1x1 chain: x -> relu(x) -> out; x=-2 collapses to the output bias.
    b = PerceptronBlock("p", np.array([[1.0]]), np.array([[0.0]]),
                        np.array([[1.0]]), np.array([[0.0]]))
    assert perceptron_forward(b, np.array([[-2.0]])).value[0, 0] == 0.0
    assert perceptron_forward(b, np.array([[3.0]])).value[0, 0] == 3.0


def test_perceptron_matches_reference(rng):
    b = PerceptronBlock.create("p", 6, 11, 4, rng)
    x = rng.standard_normal((9, 6))
    got = perceptron_forward(b, x).value
    assert np.max(np.abs(got - ref_perceptron(b, x))) < 1e-12


def test_perceptron_shape_error(rng):
    b = PerceptronBlock.create("p", 6, 11, 4, rng)
    with pytest.raises(ValueError):
        perceptron_forward(b, np.zeros((2, 5)))


def test_perceptron_grad_check(rng):
    b = PerceptronBlock.create("p", 5, 8, 3, rng)
    x = rng.standard_normal((7, 5))
    r = rng.standard_normal((7, 3))

    def f(tape, _):
        out = perceptron_forward(b, x, tape)
        return ad.sum_all(ad.mul(out, ad.const(r)))

    assert ad.grad_check(f, b.params()) < 1e-6


def test_mhsa_single_token_is_value_path(rng):
    b = AttentionBlock.create("a", 8, 2, rng)
    t = rng.standard_normal((1, 8))
    want = (t @ b.wv) @ b.wo
    got = mhsa(b, t).value
    assert np.max(np.abs(got - want)) < 1e-12


def test_mhsa_identical_tokens_identical_rows(rng):
    b = AttentionBlock.create("a", 8, 4, rng)
    row = rng.standard_normal((1, 8))
    out = mhsa(b, np.repeat(row, 2, axis=0)).value
    assert np.array_equal(out[0], out[1])


def test_mhsa_matches_reference(rng):
    b = AttentionBlock.create("a", 12, 3, rng)
    t = rng.standard_normal((4, 12))
    assert np.max(np.abs(mhsa(b, t).value - ref_attention(b, t, t))) < 1e-12


def test_mhca_single_context_row(rng):
    b = AttentionBlock.create("a", 8, 2, rng)
    q = rng.standard_normal((5, 8))
    c = rng.standard_normal((1, 8))
    want = np.tile((c @ b.wv) @ b.wo, (5, 1))
    assert np.max(np.abs(mhca(b, q, c).value - want)) < 1e-12


def test_mhca_on_self_equals_mhsa(rng):
    b = AttentionBlock.create("a", 8, 2, rng)
    t = rng.standard_normal((6, 8))
    assert np.array_equal(mhca(b, t, t).value, mhsa(b, t).value)


def test_mhca_matches_reference(rng):
    b = AttentionBlock.create("a", 10, 2, rng)
    q = rng.standard_normal((3, 10))
    c = rng.standard_normal((5, 10))
    assert np.max(np.abs(mhca(b, q, c).value - ref_attention(b, q, c))) < 1e-12


def test_mhsa_permutation_equivariance_bitwise(rng):
    # Exact, not approximate: exchanging token order must not flip one bit.
    b = AttentionBlock.create("a", 16, 4, rng)
    t = rng.standard_normal((7, 16))
    perm = rng.permutation(7)
    assert np.array_equal(mhsa(b, t[perm]).value, mhsa(b, t).value[perm])


def test_attention_maps_are_row_stochastic(rng):
    b = AttentionBlock.create("a", 12, 3, rng)
    q = rng.standard_normal((5, 12))
    c = rng.standard_normal((8, 12))
    for m in attention_maps(b, q, c):
        assert m.shape == (5, 8)
        assert np.max(np.abs(m.sum(axis=1) - 1.0)) < 1e-9


def test_attention_block_validation(rng):
    with pytest.raises(ValueError):
        AttentionBlock.create("a", 10, 3, rng)  # 10 % 3 != 0
    with pytest.raises(ValueError):
        mhca(AttentionBlock.create("a", 8, 2, rng),
             np.zeros((2, 8)), np.zeros((0, 8)))


def test_mhsa_empty_queries_allowed(rng):
    b = AttentionBlock.create("a", 8, 2, rng)
    out = mhca(b, np.zeros((0, 8)), np.ones((3, 8)))
    assert out.value.shape == (0, 8)


def test_attention_grad_check(rng):
    b = AttentionBlock.create("a", 8, 2, rng)
    q = rng.standard_normal((4, 8))
    c = rng.standard_normal((5, 8))
    r = rng.standard_normal((4, 8))

    def f(tape, _):
        out = mhca(b, q, c, tape)
        return ad.sum_all(ad.mul(out, ad.const(r)))

    assert ad.grad_check(f, b.params()) < 1e-6
