"""Multi-level fusion operators between the ego agent and one
cooperating agent: track-query fusion, rowwise map-query fusion,
occupancy-grid max fusion, and motion-query fusion.

Every operator treats an empty other-agent input as the degenerate
single-agent case, so the no-cooperation pipeline is literally fusion
with nothing to fuse; bitwise equality between the two follows.
"""

import numpy as np

from . import autodiff as ad
from . import geometry
from . import kernels
from .autodiff import Var, const
from .model import QuerySet, empty_query_set
from .nn import AttentionBlock, PerceptronBlock, mhca, mhsa, \
    perceptron_forward
from .occupancy import resample_nearest


def apply_var(transform, pts):
    """Taped rigid-transform application to (n, 2) points.

    The forward value is exactly geometry.apply, so there is a single
    definition of point transformation in the package; the backward
    right-multiplies incoming gradients by the rotation.
    """
    p = pts if isinstance(pts, Var) else const(pts)
    out = Var(geometry.apply(transform, p.value), tape=p._tape,
              parents=(p,))
    rot = np.ascontiguousarray(transform.rotation)

    def backward(g):
        p._accumulate(kernels.matmul(g, rot))

    out._backward = backward
    return out


class FusionContext:
    """Learned fusion blocks plus the other-to-ego rigid transform.

    Blocks are shared across scenes; `with_transform` rebinds the pose
    without copying parameters.
    """

    def __init__(self, track_embed, map_fuse, anchor_embed, motion_embed,
                 pos_embed, attn_track, attn_traj_self, attn_traj_cross,
                 transform=None):
        self.track_embed = track_embed
        self.map_fuse = map_fuse
        self.anchor_embed = anchor_embed
        self.motion_embed = motion_embed
        self.pos_embed = pos_embed
        self.attn_track = attn_track
        self.attn_traj_self = attn_traj_self
        self.attn_traj_cross = attn_traj_cross
        self.transform = transform if transform is not None \
            else geometry.RigidTransform2D.identity()

    @staticmethod
    def create(name, cfg, rng):
        d, h = cfg.d, cfg.d_hidden
        return FusionContext(
            PerceptronBlock.create(f"{name}.track_embed", d + 6, h, d,
                                   rng),
            PerceptronBlock.create(f"{name}.map_fuse", 2 * d, h, d, rng),
            PerceptronBlock.create(f"{name}.anchor_embed", 8, h, d, rng),
            PerceptronBlock.create(f"{name}.motion_embed", 2 * d, h, d,
                                   rng),
            PerceptronBlock.create(f"{name}.pos_embed", 2, h, d, rng),
            AttentionBlock.create(f"{name}.attn_track", d, cfg.heads,
                                  rng),
            AttentionBlock.create(f"{name}.attn_traj_self", d, cfg.heads,
                                  rng),
            AttentionBlock.create(f"{name}.attn_traj_cross", d, cfg.heads,
                                  rng))

    def with_transform(self, transform):
        return FusionContext(self.track_embed, self.map_fuse,
                             self.anchor_embed, self.motion_embed,
                             self.pos_embed, self.attn_track,
                             self.attn_traj_self, self.attn_traj_cross,
                             transform)

    def params(self):
        out = {}
        for block in (self.track_embed, self.map_fuse, self.anchor_embed,
                      self.motion_embed, self.pos_embed, self.attn_track,
                      self.attn_traj_self, self.attn_traj_cross):
            out.update(block.params())
        return out


def _rot_rows(ctx, n):
    feat = geometry.rot_feature(ctx.transform)
    return const(np.repeat(feat, n, axis=0))


def track_fusion(ctx, ego, other, tape=None):
    """Embed the other agent's track queries with the relative pose,
    concatenate behind the ego rows, and self-attend with a shared
    position embedding of the reference points.

    Output refs are exactly [ego refs; transformed other refs]; scores
    carry through.
    """
    if ego.kind != "track" or other.kind != "track":
        raise ValueError("track_fusion needs track query sets")
    if other.count and other.dim != ego.dim:
        raise ValueError("query dims differ between agents")
    if other.count:
        emb_in = ad.concat_cols([other.queries,
                                 _rot_rows(ctx, other.count)])
        q_other = perceptron_forward(ctx.track_embed, emb_in, tape)
        refs_other = apply_var(ctx.transform, other.refs)
        x = ad.concat_rows([ego.queries, q_other])
        refs = ad.concat_rows([ego.refs, refs_other])
        scores = ad.concat_rows([ego.scores, other.scores])
    else:
        x = ego.queries
        refs = ego.refs
        scores = ego.scores
    if x.value.shape[0] == 0:
        return empty_query_set("track", ego.agent, ego.dim)
    pos = perceptron_forward(ctx.pos_embed, refs, tape)
    out = mhsa(ctx.attn_track, ad.add(x, pos), tape)
    return QuerySet("track", ego.agent, out, refs, scores)


def map_fusion(ctx, ego, other, tape=None):
    """Rowwise pairing by index: each ego map query fuses with the
    pose-embedded other query through a perceptron. Counts must match;
    refs and scores stay with the ego rows."""
    if ego.kind != "map" or other.kind != "map":
        raise ValueError("map_fusion needs map query sets")
    if ego.count != other.count:
        raise ValueError("map query counts differ; pairing is by index")
    if ego.count == 0:
        return empty_query_set("map", ego.agent, ego.dim)
    emb_in = ad.concat_cols([other.queries, _rot_rows(ctx, other.count)])
    q_other = perceptron_forward(ctx.track_embed, emb_in, tape)
    fused = perceptron_forward(ctx.map_fuse,
                               ad.concat_cols([ego.queries, q_other]),
                               tape)
    return QuerySet("map", ego.agent, fused, ego.refs, ego.scores)


def occ_fusion(ego, other, transform_other_to_ego):
    """Per-cell max of the ego grid and the resampled other grid.

    Grids must share resolution and cell size. Commutative,
    associative, idempotent, and monotone cell by cell, all exact
    (it is numpy maximum on identical geometry).
    """
    if ego.probs.shape != other.probs.shape:
        raise ValueError("occupancy resolutions differ")
    if ego.cell_size != other.cell_size:
        raise ValueError("occupancy cell sizes differ")
    resampled = resample_nearest(other, ego, transform_other_to_ego)
    return ego.with_probs(np.maximum(ego.probs, resampled))


def traj_fusion(ctx, ego, other, fused_track, tape=None):
    """Fuse motion-mode queries across agents.

    The other agent's anchors and pose embed to a positional code, its
    mode queries re-embed conditioned on that code, rows concatenate
    behind the ego modes, and the result self-attends then
    cross-attends into the fused perception queries.
    """
    if ego.kind != "motion" or other.kind != "motion":
        raise ValueError("traj_fusion needs motion query sets")
    if fused_track.count == 0:
        raise ValueError("traj_fusion needs nonempty perception queries")
    if other.count and other.dim != ego.dim:
        raise ValueError("query dims differ between agents")
    if other.count:
        p_in = ad.concat_cols([other.refs, _rot_rows(ctx, other.count)])
        p_m = perceptron_forward(ctx.anchor_embed, p_in, tape)
        q_in = ad.concat_cols([other.queries, p_m])
        q_other = perceptron_forward(ctx.motion_embed, q_in, tape)
        f = ad.concat_rows([ego.queries, q_other])
        refs = ad.concat_rows([ego.refs,
                               apply_var(ctx.transform, other.refs)])
        scores = ad.concat_rows([ego.scores, other.scores])
    else:
        f = ego.queries
        refs = ego.refs
        scores = ego.scores
    if f.value.shape[0] == 0:
        return empty_query_set("motion", ego.agent, ego.dim)
    refined = mhsa(ctx.attn_traj_self, f, tape)
    out = mhca(ctx.attn_traj_cross, refined, fused_track.queries, tape)
    return QuerySet("motion", ego.agent, out, refs, scores)
