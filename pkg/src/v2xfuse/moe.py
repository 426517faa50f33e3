"""Sparse mixture-of-experts layer.

Per token: softmax over gate logits, top-k by probability (ties go to
the lowest expert index), selected weights renormalized to sum to 1,
selected expert outputs combined in ascending expert order. The
balance penalty is lambda * (Var(p) + Var(l)) with population variance
over experts; p is the batch-mean routing probability per expert and l
the fraction of routed slots per expert.

Variances are computed from deviations E*p_e - sum(p), so a perfectly
uniform distribution yields an exact 0.0 loss, not rounding dust.
"""

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import param_or_const
from .nn import PerceptronBlock, perceptron_forward


class MoeLayer:
    def __init__(self, name, experts, gate_w, k, lam):
        if not experts:
            raise ValueError("need at least one expert")
        d_in, d_out = experts[0].d_in, experts[0].d_out
        for e in experts:
            if e.d_in != d_in or e.d_out != d_out:
                raise ValueError("experts must share input/output dims")
        self.name = name
        self.experts = list(experts)
        self.gate_w = np.ascontiguousarray(gate_w, dtype=np.float64)
        if self.gate_w.shape != (d_in, len(experts)):
            raise ValueError("gate must map model dim to expert count")
        self.k = int(k)
        if not 1 <= self.k <= len(experts):
            raise ValueError("k must lie in [1, E]")
        self.lam = float(lam)
        if self.lam < 0.0:
            raise ValueError("lambda must be nonnegative")

    @property
    def n_experts(self):
        return len(self.experts)

    @staticmethod
    def create(name, d_model, d_hidden, d_out, n_experts, k, lam, rng,
               scale=1.0):
        experts = [
            PerceptronBlock.create(f"{name}.expert{i}", d_model, d_hidden,
                                   d_out, rng, scale=scale)
            for i in range(n_experts)
        ]
        gate = rng.normal(0.0, scale / np.sqrt(d_model), (d_model, n_experts))
        return MoeLayer(name, experts, gate, k, lam)

    def params(self):
        out = {(self.name, "gate_w"): self.gate_w}
        for e in self.experts:
            out.update(e.params())
        return out


class RoutingStats:
    """Batch routing summary: p, l over experts plus per-token selections."""

    def __init__(self, p, l, selections, p_node=None):
        self.p = np.asarray(p, dtype=np.float64).reshape(-1)
        self.l = np.asarray(l, dtype=np.float64).reshape(-1)
        self.selections = np.asarray(selections, dtype=np.intp)
        self._p_node = p_node  # taped (E,1) column when built under a tape

    @property
    def n_experts(self):
        return self.p.size


def _topk_selections(probs, k):
    # Stable descending sort: equal probabilities keep ascending expert
    # order, so ties always resolve to the lowest index. Selections are
    # reported ascending per token (the combination order).
    order = np.argsort(-probs, axis=1, kind="stable")
    return np.sort(order[:, :k], axis=1)


def _stats_from(probs, selections, n_experts, p_node=None):
    n = probs.shape[0]
    p = kernels.row_sum(np.ascontiguousarray(probs.T)).reshape(-1) / n
    counts = np.bincount(selections.ravel(), minlength=n_experts)
    l = counts / (n * selections.shape[1])
    return RoutingStats(p, l, selections, p_node=p_node)


def route(layer, tokens):
    """Routing decisions and batch stats; values only, no gradients."""
    tokens = np.ascontiguousarray(tokens, dtype=np.float64)
    if tokens.shape[0] == 0:
        raise ValueError("cannot route an empty token batch")
    if tokens.shape[1] != layer.gate_w.shape[0]:
        raise ValueError("token width does not match gate input dim")
    logits = kernels.matmul(tokens, layer.gate_w)
    probs = ad.softmax_rows(ad.const(logits)).value
    sel = _topk_selections(probs, layer.k)
    return _stats_from(probs, sel, layer.n_experts)


def moe_forward(layer, tokens, tape=None):
    """Sparse expert mixture over token rows -> (output, RoutingStats)."""
    x = tokens if isinstance(tokens, ad.Var) else ad.const(tokens)
    if x.value.shape[0] == 0:
        raise ValueError("cannot route an empty token batch")
    if x.value.shape[1] != layer.gate_w.shape[0]:
        raise ValueError("token width does not match gate input dim")
    n = x.value.shape[0]
    e_cnt = layer.n_experts

    gate = param_or_const(tape, (layer.name, "gate_w"), layer.gate_w)
    probs = ad.softmax_rows(ad.matmul(x, gate))
    sel = _topk_selections(probs.value, layer.k)

    # 0/1 selection mask, constant w.r.t. parameters away from ties.
    mask = np.zeros((n, e_cnt))
    np.put_along_axis(mask, sel, 1.0, axis=1)
    selp = ad.mul(probs, ad.const(mask))
    denom = ad.row_sum(selp)
    weights = ad.div(selp, denom)  # renormalized; zero on unselected

    out = ad.const(np.zeros((n, layer.experts[0].d_out)))
    for e in range(e_cnt):  # ascending expert order, pinned
        rows = np.flatnonzero(mask[:, e])
        expert = layer.experts[e]
        if tape is not None:
            expert._wrap(tape)  # register even when unused this batch
        if rows.size == 0:
            continue
        xe = ad.gather_rows(x, rows)
        ye = perceptron_forward(expert, xe, tape)
        we = ad.gather_rows(ad.slice_cols(weights, e, e + 1), rows)
        out = ad.add(out, ad.scatter_rows(ad.mul(ye, we), rows, n))

    p_node = ad.smul(ad.row_sum(ad.transpose(probs)), 1.0 / n)
    stats = _stats_from(probs.value, sel, e_cnt, p_node=p_node)
    return out, stats


def _variance_node(p_node, values):
    # Var over E entries via deviations E*x - sum(x): uniform inputs give
    # an exact zero (both terms round identically), never 1e-34 residue.
    e_cnt = values.size
    if p_node is None:
        p_node = ad.const(values.reshape(-1, 1))
    total = ad.sum_all(p_node)
    dev = ad.sub(ad.smul(p_node, float(e_cnt)), total)
    return ad.smul(ad.mean_all(ad.mul(dev, dev)), 1.0 / (e_cnt * e_cnt))


def balance_loss(stats, lam):
    """lambda * (Var(p) + Var(l)) as a (1,1) scalar node.

    Gradient flows through p when stats came from a taped moe_forward;
    the load fractions l are step-constant and enter as values.
    """
    var_p = _variance_node(stats._p_node, stats.p)
    var_l = _variance_node(None, stats.l)
    return ad.smul(ad.add(var_p, var_l), lam)
