"""Evaluation suite: assignment, detection AP, tracking AMOTA, grid IoU,
motion errors, and planning errors.

Detection matching conventions: AP uses greedy score-descending
matching; tracking and losses use Hungarian assignment with a gating
cost. All reductions are plain Python/numpy over fixed orders, so every
metric is bitwise reproducible.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import boxes


@dataclass
class Detection:
    """One BEV object: center (x, y) m, extent (length, width) m."""

    center: np.ndarray
    extent: tuple = (4.0, 1.8)
    heading: float = 0.0
    score: float = 1.0
    track_id: int | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=np.float64).reshape(2)
        if self.extent[0] <= 0.0 or self.extent[1] <= 0.0:
            raise ValueError("extent must be positive")

    def box(self):
        return (self.center[0], self.center[1], self.extent[0],
                self.extent[1], self.heading)


@dataclass
class Assignment:
    pairs: list
    unmatched_preds: list
    unmatched_gts: list
    total_cost: float


@dataclass
class MetricsReport:
    """One run's evaluation row; field order mirrors the report tables."""

    m_ap: float = 0.0
    amota: float = 0.0
    map_iou: dict = field(default_factory=dict)
    occ_iou_near: float = 0.0
    occ_iou_far: float = 0.0
    min_ade: float = 0.0
    min_fde: float = 0.0
    miss_rate: float = 0.0
    l2_1s: float = 0.0
    l2_2s: float = 0.0
    l2_3s: float = 0.0
    l2_avg: float = 0.0
    collision_1s: float = 0.0
    collision_2s: float = 0.0
    collision_3s: float = 0.0
    collision_avg: float = 0.0
    bps: float = 0.0

    def to_dict(self):
        out = {
            "mAP": self.m_ap,
            "AMOTA": self.amota,
            "map_iou": dict(self.map_iou),
            "occ_iou_near": self.occ_iou_near,
            "occ_iou_far": self.occ_iou_far,
            "minADE": self.min_ade,
            "minFDE": self.min_fde,
            "MR": self.miss_rate,
            "L2_1s": self.l2_1s,
            "L2_2s": self.l2_2s,
            "L2_3s": self.l2_3s,
            "L2_avg": self.l2_avg,
            "collision_1s": self.collision_1s,
            "collision_2s": self.collision_2s,
            "collision_3s": self.collision_3s,
            "collision_avg": self.collision_avg,
            "bps": self.bps,
        }
        return out


def hungarian(cost, gate=None):
    """Minimum-total-cost one-to-one assignment.

    Pairs with cost above `gate` are reported unmatched. total_cost
    sums the kept pairs only.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost entries must be finite")
    n_p, n_g = cost.shape
    if n_p == 0 or n_g == 0:
        return Assignment([], list(range(n_p)), list(range(n_g)), 0.0)
    rows, cols = linear_sum_assignment(cost)
    pairs = []
    total = 0.0
    for r, c in zip(rows, cols):
        if gate is not None and cost[r, c] > gate:
            continue
        pairs.append((int(r), int(c)))
        total += float(cost[r, c])
    matched_p = {p for p, _ in pairs}
    matched_g = {g for _, g in pairs}
    return Assignment(pairs,
                      [i for i in range(n_p) if i not in matched_p],
                      [j for j in range(n_g) if j not in matched_g],
                      total)


def _default_thresholds(n):
    # Grid {1/(n-1), ..., 1.0}: n-1 thresholds from n curve points.
    return [(i + 1) / (n - 1) for i in range(n - 1)]


def map_score(preds, gts, thresholds=None, n=11, criterion="iou"):
    """Mean AP over thresholds; AP_r = TP / (TP + FP + FN).

    criterion "iou": match when BEV IoU >= r. criterion "center": match
    when center distance <= r (thresholds are then meters).
    Empty GT: 1.0 when preds are empty too, else 0.0.
    """
    if criterion not in ("iou", "center"):
        raise ValueError("criterion must be 'iou' or 'center'")
    if thresholds is None:
        thresholds = _default_thresholds(n)
    if not thresholds:
        raise ValueError("need at least one threshold")
    if not gts:
        return 1.0 if not preds else 0.0

    order = sorted(range(len(preds)), key=lambda i: (-preds[i].score, i))
    aps = []
    for thr in thresholds:
        taken = set()
        tp = 0
        for pi in order:
            best_g, best_q = None, None
            for gi in range(len(gts)):
                if gi in taken:
                    continue
                if criterion == "iou":
                    q = boxes.iou(preds[pi].box(), gts[gi].box())
                    ok = q >= thr
                    better = best_q is None or q > best_q
                else:
                    q = float(np.linalg.norm(preds[pi].center
                                             - gts[gi].center))
                    ok = q <= thr
                    better = best_q is None or q < best_q
                if ok and better:
                    best_g, best_q = gi, q
            if best_g is not None:
                taken.add(best_g)
                tp += 1
        fp = len(preds) - tp
        fn = len(gts) - tp
        aps.append(tp / (tp + fp + fn))
    return float(np.mean(aps))


def _match_tracking(frames_pred, frames_gt, gate, threshold):
    """CLEAR-style counts at one score threshold: (tp, fp, fn, idsw)."""
    tp = fp = fn = idsw = 0
    last_track = {}
    for preds, gts in zip(frames_pred, frames_gt):
        kept = [d for d in preds if d.score >= threshold]
        if kept and gts:
            cost = np.array([[np.linalg.norm(p.center - g.center)
                              for g in gts] for p in kept])
            asg = hungarian(cost, gate=gate)
        else:
            asg = Assignment([], list(range(len(kept))),
                             list(range(len(gts))), 0.0)
        tp += len(asg.pairs)
        fp += len(kept) - len(asg.pairs)
        fn += len(gts) - len(asg.pairs)
        for pi, gi in asg.pairs:
            gid = gts[gi].track_id
            tid = kept[pi].track_id
            if gid in last_track and last_track[gid] != tid:
                idsw += 1
            last_track[gid] = tid
    return tp, fp, fn, idsw


def amota(frames_pred, frames_gt, n=41, gate=2.0):
    """Average MOTA over the recall sweep {1/(n-1), ..., 1.0}.

    Per target recall r, predictions are score-thresholded with the
    highest threshold whose recall reaches r; unreachable recalls score
    0. MOTA_r = 1 - (FN + FP + IDSW - (1-r) GT) / (r GT), clamped into
    [0, 1] (the report invariant; the raw formula can exceed 1 when the
    achieved recall overshoots the target).
    """
    if len(frames_pred) != len(frames_gt):
        raise ValueError("frame counts differ")
    gt_total = sum(len(f) for f in frames_gt)
    if gt_total == 0:
        raise ValueError("tracking undefined with zero ground-truth objects")
    for f in frames_gt:
        for d in f:
            if d.track_id is None:
                raise ValueError("ground-truth detections need track ids")

    scores = sorted({d.score for f in frames_pred for d in f}, reverse=True)
    curve = []
    for thr in scores:
        counts = _match_tracking(frames_pred, frames_gt, gate, thr)
        curve.append((counts[0] / gt_total, counts))

    motas = []
    for i in range(1, n):
        r = i / (n - 1)
        chosen = None
        for recall, counts in curve:  # descending threshold order
            if recall >= r:
                chosen = counts
                break
        if chosen is None:
            motas.append(0.0)
            continue
        tp, fp, fn, idsw = chosen
        value = 1.0 - (fn + fp + idsw - (1.0 - r) * gt_total) / (r * gt_total)
        motas.append(min(1.0, max(0.0, value)))
    return float(np.mean(motas))


def grid_iou(pred, gt, range_m):
    """Set IoU of binarized grids over the centered square range.

    Cells count when their center lies within [-range/2, range/2] on
    both axes of the shared grid frame. Empty union is defined as 1.0.
    """
    if pred.probs.shape != gt.probs.shape:
        raise ValueError("grid resolutions differ")
    if pred.cell_size != gt.cell_size or not np.array_equal(
            pred.origin, gt.origin):
        raise ValueError("grid geometries differ")
    centers = pred.cell_centers()
    half = range_m / 2.0
    sel = (np.abs(centers[:, 0]) <= half) & (np.abs(centers[:, 1]) <= half)
    a = pred.binarize().ravel()[sel]
    b = gt.binarize().ravel()[sel]
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def motion_errors(pred_modes, gt, delta=2.0):
    """(minADE, minFDE, miss rate) over agents.

    pred_modes: (A, M, T, 2); gt: (A, T, 2). Best mode for ADE and FDE
    are chosen independently; an agent is missed when every mode's
    final-step error exceeds delta.
    """
    pred_modes = np.asarray(pred_modes, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred_modes.ndim != 4 or gt.ndim != 3:
        raise ValueError("expected (A,M,T,2) predictions and (A,T,2) truth")
    if pred_modes.shape[0] == 0:
        raise ValueError("motion errors undefined with zero agents")
    if pred_modes.shape[2] != gt.shape[1]:
        raise ValueError("horizon mismatch")
    err = np.linalg.norm(pred_modes - gt[:, None], axis=3)  # (A, M, T)
    ade = err.mean(axis=2)
    fde = err[:, :, -1]
    min_ade = float(ade.min(axis=1).mean())
    min_fde = float(fde.min(axis=1).mean())
    missed = np.all(fde > delta, axis=1)
    return min_ade, min_fde, float(missed.mean())


def planning_errors(plan, expert, obstacles_per_step, ego_extent=(4.0, 1.8)):
    """Per-frame L2 and collision flags at the 1/2/3 s horizons.

    plan, expert: (6, 2) waypoints at 0.5 s spacing, ego frame.
    obstacles_per_step: per step, a list of (cx, cy, l, w, heading)
    obstacle boxes. L2 at horizon h averages steps 1..2h; collision at
    h flags any ego-box overlap up to step 2h. The ego box heading
    follows the plan segment direction.
    """
    plan = np.asarray(plan, dtype=np.float64)
    expert = np.asarray(expert, dtype=np.float64)
    if plan.shape != (6, 2) or expert.shape != (6, 2):
        raise ValueError("plans must be (6, 2): six steps at 0.5 s")
    if len(obstacles_per_step) != 6:
        raise ValueError("need obstacles for each of the 6 steps")

    disp = np.linalg.norm(plan - expert, axis=1)
    l2 = [float(disp[: 2 * h].mean()) for h in (1, 2, 3)]
    l2.append(float(np.mean(l2)))

    hit = []
    heading = 0.0
    prev = np.zeros(2)
    for t in range(6):
        seg = plan[t] - prev
        if np.linalg.norm(seg) > 1e-9:
            heading = float(np.arctan2(seg[1], seg[0]))
        prev = plan[t]
        ego_box = (plan[t, 0], plan[t, 1], ego_extent[0], ego_extent[1],
                   heading)
        hit.append(any(boxes.overlap(ego_box, ob)
                       for ob in obstacles_per_step[t]))
    col = [1.0 if any(hit[: 2 * h]) else 0.0 for h in (1, 2, 3)]
    col.append(float(np.mean(col)))
    return tuple(l2), tuple(col)
