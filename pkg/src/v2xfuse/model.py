"""Per-agent model: expert-routed BEV encoder stack, perception heads,
motion decoder, planner head, the six-term joint loss, and checkpoint
serialization.

All forward functions run on a gradient tape (or untaped for pure
evaluation) and are deterministic: parameter creation order, expert
iteration order, and reduction orders are pinned, so a fixed seed gives
bitwise identical outputs.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import metrics
from .autodiff import Var, const, param_or_const
from .moe import MoeLayer, balance_loss, moe_forward
from .nn import AttentionBlock, PerceptronBlock, mhca, mhsa, \
    perceptron_forward
from .occupancy import OccupancyGrid


@dataclass
class ModelConfig:
    """Dimensions and counts for one agent model."""

    raw_dim: int = 6
    d: int = 32
    heads: int = 4
    layers: int = 6
    experts: int = 8
    k: int = 2
    lam: float = 0.03
    d_hidden: int = 64
    n_track: int = 15
    n_map: int = 3
    n_motion: int = 5
    modes: int = 6
    horizon: int = 12
    plan_steps: int = 6
    grid_h: int = 8
    grid_w: int = 8
    cell_size: float = 4.0

    def __post_init__(self):
        if self.grid_h < 2 or self.grid_w < 2:
            raise ValueError("grid must be at least 2x2")
        if min(self.n_track, self.n_map, self.n_motion, self.modes,
               self.horizon, self.plan_steps) < 1:
            raise ValueError("counts must be positive")

    @property
    def perception_range(self):
        """Half-extent of the decoded-reference clamp box, meters."""
        return 0.5 * self.cell_size * max(self.grid_h, self.grid_w)

    @property
    def grid_origin(self):
        return np.array([-0.5 * self.grid_w * self.cell_size,
                         -0.5 * self.grid_h * self.cell_size])


class ParamBank:
    """Named bag of learnable arrays (embeddings and linear heads)."""

    def __init__(self, name, arrays):
        self.name = name
        self.arrays = {k: np.ascontiguousarray(v, dtype=np.float64)
                       for k, v in arrays.items()}

    def params(self):
        return {(self.name, k): v for k, v in self.arrays.items()}

    def _wrap(self, tape):
        return {k: param_or_const(tape, (self.name, k), v)
                for k, v in self.arrays.items()}


def _clip(x, lo, hi):
    """Elementwise clamp of a taped matrix into [lo, hi]."""
    n, m = x.value.shape
    low = const(np.full((n, m), lo))
    high = const(np.full((n, m), -hi))
    return ad.neg(ad.maximum(ad.neg(ad.maximum(x, low)), high))


class BevState:
    """Grid geometry plus one (H*W, D) token matrix."""

    def __init__(self, h, w, cell_size, tokens):
        if h < 2 or w < 2:
            raise ValueError("BEV grid must be at least 2x2")
        tokens = tokens if isinstance(tokens, Var) else const(tokens)
        if tokens.value.shape[0] != h * w:
            raise ValueError("token count must equal H*W")
        self.h = int(h)
        self.w = int(w)
        self.cell_size = float(cell_size)
        self.tokens = tokens


class QuerySet:
    """kind-tagged query rows with reference points and confidences."""

    KINDS = ("track", "map", "motion")

    def __init__(self, kind, agent, queries, refs, scores):
        if kind not in self.KINDS:
            raise ValueError(f"unknown query kind {kind!r}")
        queries = queries if isinstance(queries, Var) else const(queries)
        refs = refs if isinstance(refs, Var) else const(refs)
        scores = scores if isinstance(scores, Var) else const(scores)
        n = queries.value.shape[0]
        if refs.value.shape != (n, 2):
            raise ValueError("refs must be (count, 2)")
        if scores.value.shape != (n, 1):
            raise ValueError("scores must be (count, 1)")
        if n and (scores.value.min() < 0.0 or scores.value.max() > 1.0):
            raise ValueError("scores must lie in [0, 1]")
        self.kind = kind
        self.agent = int(agent)
        self.queries = queries
        self.refs = refs
        self.scores = scores

    @property
    def count(self):
        return self.queries.value.shape[0]

    @property
    def dim(self):
        return self.queries.value.shape[1]

    def score_vector(self):
        return self.scores.value[:, 0].copy()


def empty_query_set(kind, agent, dim):
    return QuerySet(kind, agent, np.zeros((0, dim)), np.zeros((0, 2)),
                    np.zeros((0, 1)))


class OccField:
    """Taped per-cell occupancy probabilities plus grid geometry."""

    def __init__(self, probs, h, w, cell_size, origin, tau=0.1):
        probs = probs if isinstance(probs, Var) else const(probs)
        if probs.value.shape != (h * w, 1):
            raise ValueError("probs must be (H*W, 1)")
        self.probs = probs
        self.h = int(h)
        self.w = int(w)
        self.cell_size = float(cell_size)
        self.origin = np.asarray(origin, dtype=np.float64).reshape(2)
        self.tau = float(tau)

    def grid(self):
        return OccupancyGrid(self.probs.value.reshape(self.h, self.w),
                             self.cell_size, self.origin, self.tau)


class TrajectorySet:
    """A agents x M modes x T steps of (x, y), plus mode scores."""

    def __init__(self, n_agents, modes, horizon, xs, ys, mode_scores):
        xs = xs if isinstance(xs, Var) else const(xs)
        ys = ys if isinstance(ys, Var) else const(ys)
        mode_scores = mode_scores if isinstance(mode_scores, Var) \
            else const(mode_scores)
        if xs.value.shape != (n_agents * modes, horizon):
            raise ValueError("xs must be (A*M, T)")
        if ys.value.shape != (n_agents * modes, horizon):
            raise ValueError("ys must be (A*M, T)")
        if mode_scores.value.shape != (n_agents, modes):
            raise ValueError("mode scores must be (A, M)")
        if n_agents and np.max(np.abs(
                mode_scores.value.sum(axis=1) - 1.0)) > 1e-9:
            raise ValueError("mode scores must sum to 1 per agent")
        self.n_agents = int(n_agents)
        self.modes = int(modes)
        self.horizon = int(horizon)
        self.xs = xs
        self.ys = ys
        self.mode_scores = mode_scores

    def values(self):
        """(A, M, T, 2) trajectory array."""
        a, m, t = self.n_agents, self.modes, self.horizon
        out = np.stack([self.xs.value, self.ys.value], axis=2)
        return out.reshape(a, m, t, 2)


def empty_trajectory_set(modes, horizon):
    return TrajectorySet(0, modes, horizon, np.zeros((0, horizon)),
                         np.zeros((0, horizon)), np.zeros((0, modes)))


@dataclass
class LossBreakdown:
    track: float
    map: float
    occ: float
    mot: float
    plan: float
    moe: float
    total: float
    node: Var = None

    def terms(self):
        return {"track": self.track, "map": self.map, "occ": self.occ,
                "mot": self.mot, "plan": self.plan, "moe": self.moe}


@dataclass
class LossTargets:
    """Ground truth for one agent's joint loss, already in its frame."""

    centers: np.ndarray        # (G, 2) object centers
    map_points: np.ndarray     # (P, 2) map element anchor points
    occ: np.ndarray            # (H, W) binary occupancy
    futures: np.ndarray        # (G, T, 2) future centers per object
    expert_plan: np.ndarray    # (plan_steps, 2)
    gate: float = 2.0

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64)
        self.map_points = np.asarray(self.map_points, dtype=np.float64)
        self.occ = np.asarray(self.occ, dtype=np.float64)
        self.futures = np.asarray(self.futures, dtype=np.float64)
        self.expert_plan = np.asarray(self.expert_plan, dtype=np.float64)


class EncoderLayer:
    """Self-attention, sensor cross-attention, then expert routing."""

    def __init__(self, self_attn, cross_attn, moe):
        if not (self_attn.d_model == cross_attn.d_model
                == moe.experts[0].d_in):
            raise ValueError("encoder layer dims disagree")
        self.self_attn = self_attn
        self.cross_attn = cross_attn
        self.moe = moe

    @staticmethod
    def create(name, cfg, rng):
        # The grid-token stack has no skip connections, so attention is
        # initialized sharp (qk_gain) to keep the tokens distinguishable
        # through the layers; otherwise the router upstream of each
        # expert sees near-identical rows and load balancing stalls.
        return EncoderLayer(
            AttentionBlock.create(f"{name}.self", cfg.d, cfg.heads, rng,
                                  qk_gain=8.0),
            AttentionBlock.create(f"{name}.cross", cfg.d, cfg.heads, rng,
                                  qk_gain=8.0),
            MoeLayer.create(f"{name}.moe", cfg.d, cfg.d_hidden, cfg.d,
                            cfg.experts, cfg.k, cfg.lam, rng))

    def params(self):
        out = {}
        out.update(self.self_attn.params())
        out.update(self.cross_attn.params())
        out.update(self.moe.params())
        return out


def encoder_layer(layer, state, context, tape=None):
    """tokens <- MoE(CrossAttn(SelfAttn(tokens))); returns new state
    plus the layer's routing stats."""
    t1 = mhsa(layer.self_attn, state.tokens, tape)
    t2 = mhca(layer.cross_attn, t1, context, tape)
    t3, stats = moe_forward(layer.moe, t2, tape)
    return BevState(state.h, state.w, state.cell_size, t3), stats


def run_encoder(layers, state, context, tape=None):
    """Sequential layer stack; balance losses summed across layers."""
    if not layers:
        raise ValueError("need at least one encoder layer")
    total = None
    all_stats = []
    for layer in layers:
        state, stats = encoder_layer(layer, state, context, tape)
        all_stats.append(stats)
        term = balance_loss(stats, layer.moe.lam)
        total = term if total is None else ad.add(total, term)
    return state, total, all_stats


class PerceptionHeads:
    """Learnable queries plus linear decode heads for tracks, map
    elements, and per-cell occupancy."""

    def __init__(self, bank, attn_track, attn_map, range_m):
        self.bank = bank
        self.attn_track = attn_track
        self.attn_map = attn_map
        self.range_m = float(range_m)

    @staticmethod
    def create(name, cfg, rng):
        d = cfg.d
        s = 1.0 / np.sqrt(d)
        bank = ParamBank(f"{name}.bank", {
            "track_embed": rng.normal(0.0, s, size=(cfg.n_track, d)),
            "map_embed": rng.normal(0.0, s, size=(cfg.n_map, d)),
            "track_ref_w": rng.normal(0.0, s, size=(d, 2)),
            "track_ref_b": np.zeros((1, 2)),
            "track_score_w": rng.normal(0.0, s, size=(d, 1)),
            "track_score_b": np.zeros((1, 1)),
            "map_ref_w": rng.normal(0.0, s, size=(d, 2)),
            "map_ref_b": np.zeros((1, 2)),
            "map_score_w": rng.normal(0.0, s, size=(d, 1)),
            "map_score_b": np.zeros((1, 1)),
            "occ_w": rng.normal(0.0, s, size=(d, 1)),
            "occ_b": np.zeros((1, 1)),
        })
        return PerceptionHeads(
            bank,
            AttentionBlock.create(f"{name}.track_attn", d, cfg.heads, rng),
            AttentionBlock.create(f"{name}.map_attn", d, cfg.heads, rng),
            cfg.perception_range)

    def params(self):
        out = {}
        out.update(self.bank.params())
        out.update(self.attn_track.params())
        out.update(self.attn_map.params())
        return out


def perception_heads(heads, state, agent, tape=None):
    """Decode (track QuerySet, map QuerySet, OccField) from BEV tokens.

    Reference points are clamped into the configured perception range;
    scores and occupancy come through sigmoids so they stay in [0, 1].
    """
    p = heads.bank._wrap(tape)
    r = heads.range_m

    def decode(embed_key, attn, ref_w, ref_b, sc_w, sc_b, kind):
        q = mhca(attn, p[embed_key], state.tokens, tape)
        refs = _clip(ad.add(ad.matmul(q, p[ref_w]), p[ref_b]), -r, r)
        scores = ad.sigmoid(ad.add(ad.matmul(q, p[sc_w]), p[sc_b]))
        return QuerySet(kind, agent, q, refs, scores)

    track = decode("track_embed", heads.attn_track, "track_ref_w",
                   "track_ref_b", "track_score_w", "track_score_b",
                   "track")
    map_qs = decode("map_embed", heads.attn_map, "map_ref_w", "map_ref_b",
                    "map_score_w", "map_score_b", "map")
    occ = ad.sigmoid(ad.add(ad.matmul(state.tokens, p["occ_w"]),
                            p["occ_b"]))
    cell = state.cell_size
    origin = np.array([-0.5 * state.w * cell, -0.5 * state.h * cell])
    field = OccField(occ, state.h, state.w, cell, origin)
    return track, map_qs, field


class MotionDecoder:
    """Per-target mode queries refined by attention and expert routing,
    decoded to cumulative trajectory offsets."""

    def __init__(self, bank, self_attn, cross_attn, moe, n_motion, modes,
                 horizon):
        self.bank = bank
        self.self_attn = self_attn
        self.cross_attn = cross_attn
        self.moe = moe
        self.n_motion = int(n_motion)
        self.modes = int(modes)
        self.horizon = int(horizon)

    @staticmethod
    def create(name, cfg, rng):
        d = cfg.d
        s = 1.0 / np.sqrt(d)
        bank = ParamBank(f"{name}.bank", {
            "mode_embed": rng.normal(0.0, s, size=(cfg.modes, d)),
            "off_w": rng.normal(0.0, s, size=(d, 2 * cfg.horizon)),
            "off_b": np.zeros((1, 2 * cfg.horizon)),
            "score_w": rng.normal(0.0, s, size=(d, 1)),
            "score_b": np.zeros((1, 1)),
        })
        return MotionDecoder(
            bank,
            AttentionBlock.create(f"{name}.self", d, cfg.heads, rng),
            AttentionBlock.create(f"{name}.cross", d, cfg.heads, rng),
            MoeLayer.create(f"{name}.moe", d, cfg.d_hidden, d,
                            cfg.experts, cfg.k, cfg.lam, rng),
            cfg.n_motion, cfg.modes, cfg.horizon)

    def params(self):
        out = {}
        out.update(self.bank.params())
        out.update(self.self_attn.params())
        out.update(self.cross_attn.params())
        out.update(self.moe.params())
        return out


def select_motion_targets(track_qs, n_motion):
    """Row indices of the highest-score track queries, best first;
    ties resolve to the lower index."""
    s = track_qs.score_vector()
    order = sorted(range(len(s)), key=lambda i: (-s[i], i))
    return order[:n_motion]


def decode_trajectories(dec, mode_rows, anchors, n_agents, tape=None):
    """Mode-query rows (A*M, D) -> TrajectorySet anchored at (A*M, 2)
    reference points; offsets accumulate step by step."""
    p = dec.bank._wrap(tape)
    t = dec.horizon
    m = dec.modes
    off = ad.add(ad.matmul(mode_rows, p["off_w"]), p["off_b"])
    xs = ad.add(ad.cumsum_rows(ad.slice_cols(off, 0, t)),
                ad.slice_cols(anchors, 0, 1))
    ys = ad.add(ad.cumsum_rows(ad.slice_cols(off, t, 2 * t)),
                ad.slice_cols(anchors, 1, 2))
    score_rows = []
    for a in range(n_agents):
        block = ad.slice_rows(mode_rows, a * m, (a + 1) * m)
        sc = ad.add(ad.matmul(block, p["score_w"]), p["score_b"])
        score_rows.append(ad.softmax_rows(ad.transpose(sc)))
    if score_rows:
        mode_scores = ad.concat_rows(score_rows)
    else:
        mode_scores = const(np.zeros((0, m)))
    return TrajectorySet(n_agents, m, t, xs, ys, mode_scores)


def motion_decoder(dec, track_qs, state, tape=None):
    """(motion QuerySet, TrajectorySet, routing stats list).

    Empty track input gives empty outputs rather than an error.
    """
    d = track_qs.dim
    if track_qs.count == 0:
        return (empty_query_set("motion", track_qs.agent, d),
                empty_trajectory_set(dec.modes, dec.horizon), [])
    sel = select_motion_targets(track_qs, dec.n_motion)
    p = dec.bank._wrap(tape)
    refined = []
    stats_list = []
    for i in sel:
        q = ad.gather_rows(track_qs.queries, [i])
        modes = ad.add(p["mode_embed"], q)          # (M, D)
        x = mhsa(dec.self_attn, modes, tape)
        x = mhca(dec.cross_attn, x, state.tokens, tape)
        x, stats = moe_forward(dec.moe, x, tape)
        stats_list.append(stats)
        refined.append(x)
    mode_rows = ad.concat_rows(refined)             # (A*M, D)
    rep = np.repeat(np.arange(len(sel)), dec.modes)
    anchors = ad.gather_rows(ad.gather_rows(track_qs.refs, sel), rep)
    traj = decode_trajectories(dec, mode_rows, anchors, len(sel), tape)
    flat_scores = ad.reshape(traj.mode_scores, len(sel) * dec.modes, 1)
    motion_qs = QuerySet("motion", track_qs.agent, mode_rows, anchors,
                         flat_scores)
    return motion_qs, traj, stats_list


class PlannerHead:
    """Ego query attends over fused motion queries; a perceptron
    decodes the waypoint plan."""

    def __init__(self, bank, attn, decode, plan_steps):
        self.bank = bank
        self.attn = attn
        self.decode = decode
        self.plan_steps = int(plan_steps)

    @staticmethod
    def create(name, cfg, rng):
        d = cfg.d
        bank = ParamBank(f"{name}.bank", {
            "ego_query": rng.normal(0.0, 1.0 / np.sqrt(d), size=(1, d)),
        })
        return PlannerHead(
            bank,
            AttentionBlock.create(f"{name}.attn", d, cfg.heads, rng),
            PerceptronBlock.create(f"{name}.decode", d, cfg.d_hidden,
                                   2 * cfg.plan_steps, rng),
            cfg.plan_steps)

    def params(self):
        out = {}
        out.update(self.bank.params())
        out.update(self.attn.params())
        out.update(self.decode.params())
        return out


def planner_head(pl, motion_qs, tape=None):
    """(plan_steps, 2) ego waypoints in the ego frame."""
    if motion_qs.count == 0:
        raise ValueError("planner needs a nonempty motion query set")
    p = pl.bank._wrap(tape)
    pooled = mhca(pl.attn, p["ego_query"], motion_qs.queries, tape)
    out = perceptron_forward(pl.decode, pooled, tape)
    return ad.reshape(out, pl.plan_steps, 2)


class AgentModel:
    """All blocks of one agent, shared across cooperating agents."""

    def __init__(self, cfg, input_proj, enc_layers, heads, motion,
                 planner):
        self.cfg = cfg
        self.input_proj = input_proj
        self.enc_layers = enc_layers
        self.heads = heads
        self.motion = motion
        self.planner = planner

    @staticmethod
    def create(cfg, rng, name="model"):
        input_proj = PerceptronBlock.create(f"{name}.input", cfg.raw_dim,
                                            cfg.d_hidden, cfg.d, rng)
        enc = [EncoderLayer.create(f"{name}.enc{i}", cfg, rng)
               for i in range(cfg.layers)]
        heads = PerceptionHeads.create(f"{name}.heads", cfg, rng)
        motion = MotionDecoder.create(f"{name}.motion", cfg, rng)
        planner = PlannerHead.create(f"{name}.planner", cfg, rng)
        return AgentModel(cfg, input_proj, enc, heads, motion, planner)

    def params(self):
        out = {}
        out.update(self.input_proj.params())
        for layer in self.enc_layers:
            out.update(layer.params())
        out.update(self.heads.params())
        out.update(self.motion.params())
        out.update(self.planner.params())
        return out


def encode_bev(model, raw_features, tape=None):
    """Project raw per-cell sensor features and run the encoder stack.

    Returns (BevState, summed balance loss Var, routing stats).
    """
    cfg = model.cfg
    raw = raw_features if isinstance(raw_features, Var) \
        else const(raw_features)
    if raw.value.shape != (cfg.grid_h * cfg.grid_w, cfg.raw_dim):
        raise ValueError("raw features must be (H*W, raw_dim)")
    tokens = perceptron_forward(model.input_proj, raw, tape)
    state = BevState(cfg.grid_h, cfg.grid_w, cfg.cell_size, tokens)
    return run_encoder(model.enc_layers, state, tokens, tape)


def _scalar(x):
    return float(x.value[0, 0])


def _sq_err_mean(a, b_const):
    d = ad.sub(a, const(b_const))
    return ad.mean_all(ad.mul(d, d))


def joint_loss(outputs, targets, tape=None):
    """Six-term training loss; every term is a nonnegative scalar node.

    track/map: Hungarian-matched reference squared error plus score
    cross-entropy (matched rows are positives). occ: per-cell cross-
    entropy on fused probabilities. mot: minimum-over-modes squared
    error on matched motion targets. plan: squared error to the expert
    plan. moe: the summed balance losses.
    """
    track_qs = outputs["track"]
    map_qs = outputs["map"]
    occ = outputs["occ"]
    traj = outputs["traj"]
    sel = outputs["motion_targets"]
    plan = outputs["plan"]
    balance = outputs["balance"]

    def match_loss(qs, points, gate):
        n = qs.count
        labels = np.zeros((n, 1))
        term = None
        pairs = []
        if n and len(points):
            cost = np.linalg.norm(
                qs.refs.value[:, None, :] - points[None, :, :], axis=2)
            asg = metrics.hungarian(cost, gate=gate)
            pairs = asg.pairs
        if pairs:
            rows = [p for p, _ in pairs]
            cols = [g for _, g in pairs]
            got = ad.gather_rows(qs.refs, rows)
            term = _sq_err_mean(got, points[cols])
            labels[rows] = 1.0
        bce = ad.mean_all(ad.bce_probs(qs.scores, labels)) if n else None
        if term is None and bce is None:
            return const(np.zeros((1, 1))), pairs
        if term is None:
            return bce, pairs
        if bce is None:
            return term, pairs
        return ad.add(term, bce), pairs

    l_track, track_pairs = match_loss(track_qs, targets.centers,
                                      targets.gate)
    l_map, _ = match_loss(map_qs, targets.map_points, targets.gate)

    occ_flat = targets.occ.reshape(-1, 1)
    l_occ = ad.mean_all(ad.bce_probs(occ.probs, occ_flat))

    slot_of = {row: slot for slot, row in enumerate(sel)}
    mot_terms = []
    m, t = traj.modes, traj.horizon
    for row, g in track_pairs:
        if row not in slot_of:
            continue
        a = slot_of[row]
        gx = targets.futures[g, :, 0].reshape(1, t)
        gy = targets.futures[g, :, 1].reshape(1, t)
        per_mode = []
        for mode in range(m):
            r = a * m + mode
            ex = traj.xs.value[r] - gx[0]
            ey = traj.ys.value[r] - gy[0]
            per_mode.append(float(np.mean(ex * ex + ey * ey)))
        best = int(np.argmin(per_mode))
        r = a * m + best
        term = ad.add(_sq_err_mean(ad.gather_rows(traj.xs, [r]), gx),
                      _sq_err_mean(ad.gather_rows(traj.ys, [r]), gy))
        mot_terms.append(term)
    if mot_terms:
        l_mot = mot_terms[0]
        for term in mot_terms[1:]:
            l_mot = ad.add(l_mot, term)
        l_mot = ad.smul(l_mot, 1.0 / len(mot_terms))
    else:
        l_mot = const(np.zeros((1, 1)))

    l_plan = _sq_err_mean(plan, targets.expert_plan)
    l_moe = balance

    node = ad.add(ad.add(ad.add(l_track, l_map), ad.add(l_occ, l_mot)),
                  ad.add(l_plan, l_moe))
    parts = [_scalar(x) for x in
             (l_track, l_map, l_occ, l_mot, l_plan, l_moe)]
    return LossBreakdown(*parts, total=_scalar(node), node=node)


CKPT_MAGIC = 0x56325850
CKPT_VERSION = 1


def save_params(path, params):
    """Checkpoint: shape manifest header then flat little-endian f64."""
    entries = list(params.items())
    head = struct.pack("<IHI", CKPT_MAGIC, CKPT_VERSION, len(entries))
    body = b""
    for (name, attr), arr in entries:
        nb = name.encode("utf-8")
        ab = attr.encode("utf-8")
        head += struct.pack("<H", len(nb)) + nb
        head += struct.pack("<H", len(ab)) + ab
        head += struct.pack("<B", arr.ndim)
        head += struct.pack(f"<{arr.ndim}I", *arr.shape)
        body += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    with open(path, "wb") as f:
        f.write(head + body)


def load_params(path):
    """Read a checkpoint back into {(name, attr): array}."""
    with open(path, "rb") as f:
        buf = f.read()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ValueError("truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    magic, version, count = struct.unpack("<IHI", take(10))
    if magic != CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    manifest = []
    for _ in range(count):
        nlen, = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        alen, = struct.unpack("<H", take(2))
        attr = take(alen).decode("utf-8")
        ndim, = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        manifest.append(((name, attr), shape))
    out = {}
    for key, shape in manifest:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(8 * n), dtype="<f8").reshape(shape)
        out[key] = arr.copy()
    if pos != len(buf):
        raise ValueError("trailing bytes in checkpoint")
    return out


def assign_params(params, loaded):
    """Copy checkpoint values into live arrays; keys/shapes must match."""
    if set(params) != set(loaded):
        raise ValueError("checkpoint parameter keys do not match model")
    for key, arr in params.items():
        src = loaded[key]
        if src.shape != arr.shape:
            raise ValueError(f"shape mismatch for {key}")
        arr[...] = src


def sgd_step(params, grads, lr):
    """In-place gradient descent update over a parameter dict.

    Parameters absent from `grads` (never registered on the tape this
    step) are left untouched.
    """
    if lr <= 0.0:
        raise ValueError("learning rate must be positive")
    for key, arr in params.items():
        g = grads.get(key)
        if g is not None:
            arr -= lr * g
