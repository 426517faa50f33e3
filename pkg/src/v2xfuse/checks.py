"""Gradient integrity suite over the composite operators.

Each check builds a seeded micro instance, reduces the operator output
to a scalar, and compares tape gradients against central finite
differences via autodiff.grad_check. Inputs are chosen away from
routing ties and matching boundaries so the finite-difference
perturbation cannot flip a discrete decision; the tie margins are
asserted, not assumed. Used by both the CLI `gradcheck` subcommand and
the acceptance tests.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import const, grad_check, param_or_const
from .fusion import FusionContext, track_fusion, traj_fusion
from .geometry import RigidTransform2D
from .model import (BevState, EncoderLayer, LossTargets, ModelConfig,
                    OccField, QuerySet, TrajectorySet, encoder_layer,
                    joint_loss)
from .moe import MoeLayer, balance_loss, moe_forward
from .nn import (AttentionBlock, PerceptronBlock, mhsa,
                 perceptron_forward)
from .pipeline import RunConfig, build_model, run_pipeline
from .scenario import gen_scenario

GRAD_TOLERANCE = 1e-5


def _sq_sum(v):
    return ad.sum_all(ad.mul(v, v))


def _query_set(kind, n, seed, agent=0, dim=8):
    rng = np.random.default_rng(seed)
    return QuerySet(kind, agent,
                    rng.normal(size=(n, dim)),
                    rng.normal(size=(n, 2)) * 5.0,
                    rng.uniform(0.2, 0.9, size=(n, 1)))


def _micro_cfg():
    return ModelConfig(raw_dim=4, d=8, heads=2, layers=1, experts=2,
                       k=1, d_hidden=8, n_track=3, n_map=2, n_motion=2,
                       modes=2, horizon=3, plan_steps=6, grid_h=3,
                       grid_w=3, cell_size=4.0)


def _tie_margin(probs, k):
    """Smallest gap between the k-th and (k+1)-th routing probability
    over the token batch; infinite when k covers all experts."""
    if k >= probs.shape[1]:
        return np.inf
    srt = np.sort(probs, axis=1)[:, ::-1]
    return float(np.min(srt[:, k - 1] - srt[:, k]))


def check_perceptron(eps=1e-5):
    rng = np.random.default_rng(101)
    block = PerceptronBlock.create("pb", 3, 5, 2, rng)
    x = rng.normal(size=(4, 3))

    def f(tape, _):
        return _sq_sum(perceptron_forward(block, const(x), tape))

    return grad_check(f, block.params(), eps=eps)


def check_attention(eps=1e-5):
    rng = np.random.default_rng(102)
    block = AttentionBlock.create("ab", 4, 2, rng)
    x = rng.normal(size=(5, 4))

    def f(tape, _):
        return _sq_sum(mhsa(block, const(x), tape))

    return grad_check(f, block.params(), eps=eps)


def check_moe(eps=1e-5):
    rng = np.random.default_rng(103)
    layer = MoeLayer.create("ml", 4, 6, 4, 3, 2, 0.5, rng)
    x = rng.normal(size=(6, 4))
    probs = ad.softmax_rows(const(x @ layer.gate_w)).value
    margin = _tie_margin(probs, layer.k)
    if margin < 1e-3:
        raise RuntimeError(f"routing tie margin too small: {margin}")

    def f(tape, _):
        out, stats = moe_forward(layer, const(x), tape)
        return ad.add(_sq_sum(out), balance_loss(stats, layer.lam))

    return grad_check(f, layer.params(), eps=eps)


def check_encoder_layer(eps=1e-5):
    rng = np.random.default_rng(104)
    cfg = _micro_cfg()
    layer = EncoderLayer.create("el", cfg, rng)
    n = cfg.grid_h * cfg.grid_w
    tokens = rng.normal(size=(n, cfg.d))
    context = rng.normal(size=(n, cfg.d))

    def f(tape, _):
        state = BevState(cfg.grid_h, cfg.grid_w, cfg.cell_size,
                         const(tokens))
        out, stats = encoder_layer(layer, state, const(context), tape)
        return ad.add(_sq_sum(out.tokens),
                      balance_loss(stats, cfg.lam))

    return grad_check(f, layer.params(), eps=eps)


def check_track_fusion(eps=1e-5):
    rng = np.random.default_rng(105)
    ctx = FusionContext.create("tf", _micro_cfg(), rng) \
        .with_transform(RigidTransform2D.from_pose(3.0, -2.0, 0.7))
    ego = _query_set("track", 2, 81)
    other = _query_set("track", 2, 82, agent=1)
    params = {}
    for block in (ctx.track_embed, ctx.pos_embed, ctx.attn_track):
        params.update(block.params())

    def f(tape, _):
        return _sq_sum(track_fusion(ctx, ego, other, tape).queries)

    return grad_check(f, params, eps=eps)


def check_traj_fusion(eps=1e-5):
    rng = np.random.default_rng(106)
    ctx = FusionContext.create("jf", _micro_cfg(), rng) \
        .with_transform(RigidTransform2D.from_pose(-1.0, 2.0, -0.4))
    ego = _query_set("motion", 4, 83)
    other = _query_set("motion", 2, 84, agent=1)
    fused_track = _query_set("track", 3, 85)
    params = {}
    for block in (ctx.anchor_embed, ctx.motion_embed,
                  ctx.attn_traj_self, ctx.attn_traj_cross):
        params.update(block.params())

    def f(tape, _):
        out = traj_fusion(ctx, ego, other, fused_track, tape)
        return _sq_sum(out.queries)

    return grad_check(f, params, eps=eps)


def check_joint_loss(eps=1e-5):
    """End-to-end loss graph, differentiated through every term.

    The training loss is a function of the prediction tensors: matched
    reference error and score cross-entropy for track and map queries,
    per-cell occupancy cross-entropy, best-mode trajectory error on the
    selected motion slots, plan error, and the balance pass-through.
    Those tensors are the loss's own differentiable variables, so the
    check probes them directly. Predictions are seeded near their
    targets with wide margins: every assignment decision (Hungarian
    matching, the distance gate, the per-slot best mode) sits far from
    a flip, and the asserts below pin that down rather than assume it.
    """
    rng = np.random.default_rng(107)
    h = w = 3
    modes, horizon, plan_steps = 2, 3, 6
    gate = 2.0

    centers = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    n_gt = centers.shape[0]
    futures = centers[:, None, :] + np.cumsum(
        rng.uniform(0.2, 0.6, (n_gt, horizon, 2)), axis=1)
    map_gt = np.array([[3.0, 3.0], [-4.0, 2.0], [5.0, -4.0]])
    occ_gt = (rng.uniform(size=(h, w)) < 0.5).astype(float)
    expert_plan = np.cumsum(rng.uniform(0.1, 0.5, (plan_steps, 2)),
                            axis=0)
    targets = LossTargets(centers=centers, map_points=map_gt,
                          occ=occ_gt, futures=futures,
                          expert_plan=expert_plan, gate=gate)

    n_track = n_gt + 1
    track_refs = np.vstack([centers + rng.uniform(-0.3, 0.3, (n_gt, 2)),
                            [[20.0, 20.0]]])
    n_map = map_gt.shape[0]
    sel = [0, 1]
    n_slots = len(sel)

    # Mode 0 tracks the ground-truth future closely; mode 1 is shifted
    # well away, so the per-slot argmin has a wide margin.
    xs = np.zeros((n_slots * modes, horizon))
    ys = np.zeros((n_slots * modes, horizon))
    for slot, row in enumerate(sel):
        fut = futures[row]
        jit = rng.uniform(-0.2, 0.2, (horizon, 2))
        xs[slot * modes] = fut[:, 0] + jit[:, 0]
        ys[slot * modes] = fut[:, 1] + jit[:, 1]
        xs[slot * modes + 1] = fut[:, 0] + 2.5
        ys[slot * modes + 1] = fut[:, 1] + 2.5
    mode_scores = np.full((n_slots, modes), 1.0 / modes)

    params = {
        ("pred.track", "refs"): track_refs,
        ("pred.track", "scores"): rng.uniform(0.25, 0.75, (n_track, 1)),
        ("pred.map", "refs"): map_gt + rng.uniform(-0.3, 0.3, (n_map, 2)),
        ("pred.map", "scores"): rng.uniform(0.25, 0.75, (n_map, 1)),
        ("pred.occ", "probs"): rng.uniform(0.15, 0.85, (h * w, 1)),
        ("pred.traj", "xs"): xs,
        ("pred.traj", "ys"): ys,
        ("pred.plan", "steps"):
            expert_plan + rng.uniform(-0.4, 0.4, (plan_steps, 2)),
        ("pred.moe", "balance"): np.array([[0.37]]),
    }

    # Assignment margins: each query sits within 0.45 of its own target
    # and at least 4 away from every other, against a 2.0 gate; the
    # rejected mode is at least 1.0 worse per step. An eps probe moves
    # any distance by under 1e-4, so no discrete decision can flip.
    for refs, points in ((track_refs[:n_gt], centers),
                         (params[("pred.map", "refs")], map_gt)):
        d = np.linalg.norm(refs[:, None, :] - points[None, :, :], axis=2)
        assert float(np.max(np.diag(d))) < 0.45
        off = d[~np.eye(d.shape[0], dtype=bool)]
        assert float(np.min(off)) > 4.0
    for slot in range(n_slots):
        best = np.mean((xs[slot * modes] - futures[sel[slot], :, 0]) ** 2
                       + (ys[slot * modes] - futures[sel[slot], :, 1]) ** 2)
        other = np.mean(
            (xs[slot * modes + 1] - futures[sel[slot], :, 0]) ** 2
            + (ys[slot * modes + 1] - futures[sel[slot], :, 1]) ** 2)
        assert other - best > 1.0

    def f(tape, _):
        track = QuerySet(
            "track", 0, const(np.zeros((n_track, 2))),
            param_or_const(tape, ("pred.track", "refs"),
                           params[("pred.track", "refs")]),
            param_or_const(tape, ("pred.track", "scores"),
                           params[("pred.track", "scores")]))
        map_qs = QuerySet(
            "map", 0, const(np.zeros((n_map, 2))),
            param_or_const(tape, ("pred.map", "refs"),
                           params[("pred.map", "refs")]),
            param_or_const(tape, ("pred.map", "scores"),
                           params[("pred.map", "scores")]))
        occ = OccField(
            param_or_const(tape, ("pred.occ", "probs"),
                           params[("pred.occ", "probs")]),
            h, w, 4.0, (-6.0, -6.0))
        traj = TrajectorySet(
            n_slots, modes, horizon,
            param_or_const(tape, ("pred.traj", "xs"),
                           params[("pred.traj", "xs")]),
            param_or_const(tape, ("pred.traj", "ys"),
                           params[("pred.traj", "ys")]),
            const(mode_scores))
        outputs = {
            "track": track,
            "map": map_qs,
            "occ": occ,
            "traj": traj,
            "motion_targets": sel,
            "plan": param_or_const(tape, ("pred.plan", "steps"),
                                   params[("pred.plan", "steps")]),
            "balance": param_or_const(tape, ("pred.moe", "balance"),
                                      params[("pred.moe", "balance")]),
        }
        return joint_loss(outputs, targets, tape).node

    return grad_check(f, params, eps=eps)


def check_pipeline_weights(eps=1e-5):
    """Coarse full-composition probe: loss gradients for every weight.

    Central differences cannot certify this graph tightly: at eps=1e-5
    in 64-bit arithmetic the difference quotient carries noise of a few
    ulps of the loss divided by 2*eps, so any weight whose true loss
    gradient is below roughly 1e-4 yields a relative error dominated by
    the probe, not the tape. Deep compositions always contain such
    weakly coupled coordinates, so this probe only bounds gross defects
    (a sign or scale error on any live path shows up as O(1)); the
    suite's per-operator checks carry the tight tolerances.
    """
    cfg = RunConfig(seed=2, d=4, heads=1, layers=1, experts=2, k=2,
                    d_hidden=4, raw_dim=6, n_track=2, n_map=2,
                    n_motion=2, modes=3, horizon=2, grid_h=3, grid_w=3,
                    lam=0.5)
    scn = gen_scenario(2, difficulty=1)
    model, ctx = build_model(cfg)
    params = {}
    params.update(model.params())
    params.update(ctx.params())

    def f(tape, _):
        _, _, loss = run_pipeline(scn, cfg, model, ctx, mode="train",
                                  tape=tape)
        return loss.node

    return grad_check(f, params, eps=eps)


SUITE = (
    ("perceptron", check_perceptron),
    ("attention", check_attention),
    ("moe_layer", check_moe),
    ("encoder_layer", check_encoder_layer),
    ("track_fusion", check_track_fusion),
    ("traj_fusion", check_traj_fusion),
    ("joint_loss", check_joint_loss),
)


def gradient_suite(eps=1e-5, names=None):
    """[(name, max_rel_err), ...] over the composite operators."""
    wanted = set(names) if names is not None else None
    out = []
    for name, fn in SUITE:
        if wanted is not None and name not in wanted:
            continue
        out.append((name, fn(eps)))
    return out
