"""End-to-end cooperative run: encode both agents, exchange messages
under a byte budget, fuse per toggles, decode motion, plan, score.

The no-cooperation path is not a separate branch: every fusion
operator is always invoked, with an empty other-agent input whenever a
toggle is off or nothing survived the channel. Turning both toggles
off, setting the budget to zero, or losing every message therefore
produce bitwise-identical ego outputs.

Training mode exchanges query sets in-process at full precision so
gradients flow into both encoders; evaluation mode runs the real wire
(f32 quantization, budget constraint, decode) and computes the metric
report.
"""

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from . import comm, metrics
from .autodiff import const
from .fusion import FusionContext, map_fusion, track_fusion, traj_fusion
from .metrics import Detection, MetricsReport
from .model import (AgentModel, LossTargets, ModelConfig, MotionDecoder,
                    OccField, QuerySet, decode_trajectories, empty_query_set,
                    encode_bev, joint_loss, perception_heads, planner_head,
                    motion_decoder, select_motion_targets)
from .moe import balance_loss
from .occupancy import resample_map


@dataclass
class RunConfig:
    """Toggles, dimensions, and channel settings for one run."""

    p_level: bool = True          # perception-level fusion
    m_level: bool = True          # prediction-level fusion
    moe_encoder: bool = True
    moe_decoder: bool = True
    d: int = 16
    heads: int = 2
    layers: int = 2
    experts: int = 4
    k: int = 2
    lam: float = 0.03
    d_hidden: int = 32
    raw_dim: int = 6
    n_track: int = 15
    n_map: int = 3
    n_motion: int = 5
    modes: int = 6
    horizon: int = 12
    plan_steps: int = 6
    grid_h: int = 10
    grid_w: int = 10
    cell_size: float = 4.0
    budget: float = math.inf      # channel cap, bytes per second
    freq: float = 2.0
    seed: int = 0
    difficulty: int = 1
    gate: float = 2.0             # Hungarian gate for losses, meters
    score_threshold: float = 0.5  # detection cut for the mAP column
    map_radii: tuple = (0.5, 1.0, 2.0)
    miss_delta: float = 2.0

    def __post_init__(self):
        if not (self.budget >= 0.0):
            raise ValueError("budget must be nonnegative")
        if not (np.isfinite(self.freq) and self.freq > 0.0):
            raise ValueError("frequency must be positive")
        if self.experts < 1 or not (1 <= self.k <= self.experts):
            raise ValueError("need 1 <= k <= experts")
        if not (0.0 <= self.score_threshold <= 1.0):
            raise ValueError("score threshold must lie in [0, 1]")

    def model_config(self, moe_on):
        return ModelConfig(
            raw_dim=self.raw_dim, d=self.d, heads=self.heads,
            layers=self.layers,
            experts=self.experts if moe_on else 1,
            k=self.k if moe_on else 1,
            lam=self.lam, d_hidden=self.d_hidden,
            n_track=self.n_track, n_map=self.n_map,
            n_motion=self.n_motion, modes=self.modes,
            horizon=self.horizon, plan_steps=self.plan_steps,
            grid_h=self.grid_h, grid_w=self.grid_w,
            cell_size=self.cell_size)

    def to_dict(self):
        out = asdict(self)
        out["map_radii"] = list(self.map_radii)
        out["budget"] = None if math.isinf(self.budget) else self.budget
        return out

    @staticmethod
    def from_dict(data):
        known = {f.name for f in fields(RunConfig)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = dict(data)
        if "map_radii" in kwargs:
            kwargs["map_radii"] = tuple(kwargs["map_radii"])
        if kwargs.get("budget", 0.0) is None:
            kwargs["budget"] = math.inf
        return RunConfig(**kwargs)


def build_model(cfg, rng=None):
    """(AgentModel, FusionContext) seeded from cfg.seed.

    The encoder and motion decoder carry their own expert counts so the
    two MoE toggles are independent; a disabled stage collapses to a
    single always-selected expert, which is a plain feed-forward block.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    mc_enc = cfg.model_config(cfg.moe_encoder)
    model = AgentModel.create(mc_enc, rng)
    if cfg.moe_decoder != cfg.moe_encoder:
        mc_dec = cfg.model_config(cfg.moe_decoder)
        model.motion = MotionDecoder.create("model.motion", mc_dec, rng)
    ctx = FusionContext.create("fusion", mc_enc, rng)
    return model, ctx


def all_params(model, ctx):
    out = {}
    out.update(model.params())
    out.update(ctx.params())
    return out


def _query_message(qs, sender):
    return comm.V2XMessage(qs.kind, sender, 0,
                           queries=qs.queries.value,
                           refs=qs.refs.value,
                           scores=qs.scores.value[:, 0])


def _decoded_query_set(msg, agent):
    return QuerySet(msg.kind, agent, msg.queries, msg.refs,
                    msg.scores.reshape(-1, 1))


def _fuse_occupancy(ego_field, other_probs, other_grid, transform):
    """Taped per-cell max with the other grid resampled onto the ego
    geometry; value-equal to the untaped grid-level fusion."""
    idx, mask = resample_map(other_grid, ego_field.grid(), transform)
    gathered = ad.gather_rows(other_probs, [int(i) for i in idx])
    masked = ad.mul(gathered, const(mask.astype(np.float64).reshape(-1, 1)))
    fused = ad.maximum(ego_field.probs, masked)
    return OccField(fused, ego_field.h, ego_field.w, ego_field.cell_size,
                    ego_field.origin, ego_field.tau)


def _map_hit_fractions(map_qs, gt_points, radii):
    """Fraction of GT map points with a predicted anchor within each
    radius."""
    out = {}
    refs = map_qs.refs.value
    for r in radii:
        if len(gt_points) == 0:
            out[f"{r:g}"] = 1.0
            continue
        if refs.shape[0] == 0:
            out[f"{r:g}"] = 0.0
            continue
        d = np.linalg.norm(gt_points[:, None, :] - refs[None, :, :],
                           axis=2)
        out[f"{r:g}"] = float(np.mean(d.min(axis=1) <= r))
    return out


def _motion_metrics(traj, anchors, gt_futures, delta):
    """Associate motion slots to GT by anchor distance, then score."""
    a = traj.n_agents
    g = gt_futures.shape[0]
    if a == 0 or g == 0:
        return float("nan"), float("nan"), float("nan")
    gt_centers = gt_futures[:, 0, :]  # proximity proxy: first future step
    cost = np.linalg.norm(anchors[:, None, :] - gt_centers[None, :, :],
                          axis=2)
    asg = metrics.hungarian(cost)
    values = traj.values()
    pred = np.stack([values[s] for s, _ in asg.pairs])
    gt = np.stack([gt_futures[j] for _, j in asg.pairs])
    return metrics.motion_errors(pred, gt, delta=delta)


def run_pipeline(scn, cfg, model=None, ctx=None, mode="eval", tape=None):
    """(outputs, MetricsReport or None, LossBreakdown).

    mode "eval": real wire (f32, budget), metrics computed, untaped
    consts throughout. mode "train": in-process full-precision
    exchange, no budget, metrics skipped; pass a GradientTape to
    collect parameter gradients of the returned loss node.
    """
    if mode not in ("eval", "train"):
        raise ValueError("mode must be 'eval' or 'train'")
    if scn.futures.shape[1] < cfg.horizon:
        raise ValueError("scenario horizon shorter than the model's")
    if model is None or ctx is None:
        built_model, built_ctx = build_model(cfg)
        model = model if model is not None else built_model
        ctx = ctx if ctx is not None else built_ctx

    t_i2e = scn.transform_infra_to_ego()
    ctx = ctx.with_transform(t_i2e)
    mc = model.cfg

    # Both agents run the same encoder and heads (shared weights).
    raw_e = scn.raw_features("ego", mc.grid_h, mc.grid_w, mc.cell_size,
                             mc.raw_dim)
    state_e, bal_e, stats_e = encode_bev(model, raw_e, tape)
    track_e, map_e, occ_e = perception_heads(model.heads, state_e, 0,
                                             tape)

    infra_tape = tape if mode == "train" else None
    raw_i = scn.raw_features("infra", mc.grid_h, mc.grid_w, mc.cell_size,
                             mc.raw_dim)
    state_i, _, _ = encode_bev(model, raw_i, infra_tape)
    track_i, map_i, occ_i = perception_heads(model.heads, state_i, 1,
                                             infra_tape)
    motion_i = None
    if cfg.m_level:
        motion_i, _, _ = motion_decoder(model.motion, track_i, state_i,
                                        infra_tape)

    # Channel: build, constrain, decode. Training bypasses the wire.
    other_track = empty_query_set("track", 1, mc.d)
    other_map = empty_query_set("map", 1, mc.d)
    other_motion = empty_query_set("motion", 1, mc.d)
    other_occ = None  # (probs Var, OccupancyGrid) when present
    kept = []
    realized_bps = 0.0
    if mode == "eval":
        outbox = []
        if cfg.p_level:
            outbox.append(_query_message(track_i, 1))
            outbox.append(_query_message(map_i, 1))
            outbox.append(comm.V2XMessage("occ", 1, 0, grid=occ_i.grid()))
        if cfg.m_level and motion_i is not None and motion_i.count:
            outbox.append(_query_message(motion_i, 1))
        kept = comm.constrain(outbox,
                              comm.ChannelBudget(cfg.budget, cfg.freq))
        kept = [comm.decode(comm.encode(m)) for m in kept]
        realized_bps = comm.bps(kept, cfg.freq)
        for msg in kept:
            if msg.kind == "track":
                other_track = _decoded_query_set(msg, 1)
            elif msg.kind == "map":
                other_map = _decoded_query_set(msg, 1)
            elif msg.kind == "motion":
                other_motion = _decoded_query_set(msg, 1)
            else:
                other_occ = (const(msg.grid.probs.reshape(-1, 1)),
                             msg.grid)
    else:
        if cfg.p_level:
            other_track = track_i
            other_map = map_i
            other_occ = (occ_i.probs, occ_i.grid())
        if cfg.m_level and motion_i is not None and motion_i.count:
            other_motion = motion_i

    # Fusion. Operators always run; empty inputs are the single-agent
    # degenerate case. Map fusion pairs by index, so a partially
    # dropped map message is unusable and the ego rows pass through.
    fused_track = track_fusion(ctx, track_e, other_track, tape)
    if other_map.count == map_e.count and other_map.count:
        fused_map = map_fusion(ctx, map_e, other_map, tape)
    else:
        fused_map = map_e
    if other_occ is not None:
        fused_occ = _fuse_occupancy(occ_e, other_occ[0], other_occ[1],
                                    t_i2e)
    else:
        fused_occ = occ_e

    # Ego motion from the fused perception queries, then mode-query
    # fusion and a re-decode of the ego rows with the shared heads.
    sel = select_motion_targets(fused_track, model.motion.n_motion)
    motion_e, _, stats_m = motion_decoder(model.motion, fused_track,
                                          state_e, tape)
    fused_motion = traj_fusion(ctx, motion_e, other_motion, fused_track,
                               tape)
    n_ego_rows = motion_e.count
    ego_rows = ad.slice_rows(fused_motion.queries, 0, n_ego_rows)
    traj = decode_trajectories(model.motion, ego_rows, motion_e.refs,
                               len(sel), tape)

    plan = planner_head(model.planner, fused_motion, tape)

    balance = bal_e
    for stats in stats_m:
        balance = ad.add(balance, balance_loss(stats, mc.lam))

    outputs = {
        "track": fused_track,
        "map": fused_map,
        "occ": fused_occ,
        "traj": traj,
        "motion_targets": sel,
        "plan": plan,
        "balance": balance,
        "routing": list(stats_e) + list(stats_m),
        "messages": kept,
        "bps": realized_bps,
        "ego_track": track_e,
        "infra_track": track_i,
    }

    targets = scn.loss_targets(mc.grid_h, mc.grid_w, mc.cell_size,
                               cfg.horizon, gate=cfg.gate)
    loss = joint_loss(outputs, targets, tape)

    report = None
    if mode == "eval":
        report = _evaluate(scn, cfg, outputs, targets, realized_bps)
    return outputs, report, loss


def _evaluate(scn, cfg, outputs, targets, realized_bps):
    fused_track = outputs["track"]
    gts = scn.gt_detections()

    preds_all = [Detection(fused_track.refs.value[i],
                           score=float(fused_track.scores.value[i, 0]),
                           track_id=i)
                 for i in range(fused_track.count)]
    preds_cut = [d for d in preds_all if d.score >= cfg.score_threshold]
    m_ap = metrics.map_score(preds_cut, gts, thresholds=[0.5, 1.0, 2.0,
                                                         4.0],
                             criterion="center")
    amota_v = metrics.amota([preds_all], [gts], gate=cfg.gate)

    map_iou = _map_hit_fractions(outputs["map"], targets.map_points,
                                 cfg.map_radii)

    gt_grid = scn.gt_occupancy("ego", cfg.grid_h, cfg.grid_w,
                               cfg.cell_size)
    pred_grid = outputs["occ"].grid()
    far = cfg.cell_size * max(cfg.grid_h, cfg.grid_w)
    occ_far = metrics.grid_iou(pred_grid, gt_grid, far)
    occ_near = metrics.grid_iou(pred_grid, gt_grid, far / 2.0)

    traj = outputs["traj"]
    anchors = fused_track.refs.value[outputs["motion_targets"]]
    min_ade, min_fde, miss = _motion_metrics(traj, anchors,
                                             targets.futures,
                                             cfg.miss_delta)

    l2, col = metrics.planning_errors(outputs["plan"].value,
                                      targets.expert_plan,
                                      scn.obstacles_per_step(6))

    return MetricsReport(
        m_ap=m_ap, amota=amota_v, map_iou=map_iou,
        occ_iou_near=occ_near, occ_iou_far=occ_far,
        min_ade=min_ade, min_fde=min_fde, miss_rate=miss,
        l2_1s=l2[0], l2_2s=l2[1], l2_3s=l2[2], l2_avg=l2[3],
        collision_1s=col[0], collision_2s=col[1], collision_3s=col[2],
        collision_avg=col[3], bps=realized_bps)
