"""Experiment drivers over synthetic scenes: the 2^4 toggle ablation
grid, a channel-budget sweep, and a short full-pipeline training loop.

Rows are plain dicts keyed by column name so the CLI can serialize
them to CSV or JSON unchanged. Scenario lists are always processed in
seed order, which pins the float accumulation order and makes repeated
calls bitwise reproducible.
"""

import itertools
import math
from dataclasses import replace

import numpy as np

from . import autodiff as ad
from .model import sgd_step
from .pipeline import RunConfig, all_params, build_model, run_pipeline
from .scenario import gen_scenario

TOGGLES = ("p_level", "m_level", "moe_encoder", "moe_decoder")

# The ablation table's metric columns, in emission order.
TABLE_COLUMNS = ("mAP", "AMOTA", "minADE", "L2_1s", "L2_2s", "L2_3s",
                 "L2_avg", "collision_avg")


def default_scenarios(cfg, count=2):
    """Deterministic scenario batch: seeds cfg.seed .. cfg.seed+count-1."""
    if count < 1:
        raise ValueError("need at least one scenario")
    return [gen_scenario(cfg.seed + i, cfg.difficulty)
            for i in range(count)]


def toggle_grid(base):
    """All 16 on/off combinations of the four cooperation toggles,
    in lexicographic (False before True) order."""
    out = []
    for p, m, e, d in itertools.product((False, True), repeat=4):
        out.append(replace(base, p_level=p, m_level=m,
                           moe_encoder=e, moe_decoder=d))
    return out


def flatten_report(rep):
    """Report as one flat dict: nested map-hit fractions become
    `map_iou@{radius}` columns so rows serialize to CSV unchanged."""
    out = {}
    for key, val in rep.to_dict().items():
        if key == "map_iou":
            for r, v in val.items():
                out[f"map_iou@{r}"] = v
        else:
            out[key] = val
    return out


def _averaged_metrics(cfg, scenarios, model, ctx):
    flats = []
    for scn in sorted(scenarios, key=lambda s: s.seed):
        _, rep, _ = run_pipeline(scn, cfg, model, ctx)
        flats.append(flatten_report(rep))
    return {k: float(np.mean([f[k] for f in flats])) for k in flats[0]}


def ablate(configs, scenarios):
    """One row per config: the toggle settings plus every metric
    averaged over the scenario batch."""
    if not configs:
        raise ValueError("need at least one config")
    if not scenarios:
        raise ValueError("need at least one scenario")
    rows = []
    for cfg in configs:
        model, ctx = build_model(cfg)
        row = {t: getattr(cfg, t) for t in TOGGLES}
        row.update(_averaged_metrics(cfg, scenarios, model, ctx))
        rows.append(row)
    return rows


def ablation_table(rows):
    """Restrict full ablation rows to the reporting column set: the
    four toggles plus TABLE_COLUMNS, in that order. Raises if a row is
    missing any of them, so a renamed metric fails loudly here rather
    than emitting a silently narrower table."""
    cols = TOGGLES + TABLE_COLUMNS
    out = []
    for row in rows:
        missing = [c for c in cols if c not in row]
        if missing:
            raise KeyError(f"ablation row missing columns: {missing}")
        out.append({c: row[c] for c in cols})
    return out


def bandwidth_sweep(budgets, cfg, scenarios):
    """One row per budget, ascending; weights are built once so rows
    differ only through the channel."""
    budgets = [float(b) for b in budgets]
    if not budgets:
        raise ValueError("need at least one budget")
    if any(b < 0 for b in budgets):
        raise ValueError("budgets must be nonnegative")
    if sorted(budgets) != budgets or len(set(budgets)) != len(budgets):
        raise ValueError("budgets must be strictly ascending")
    if not scenarios:
        raise ValueError("need at least one scenario")
    model, ctx = build_model(cfg)
    rows = []
    for b in budgets:
        cfg_b = replace(cfg, budget=b)
        row = {"budget": b}
        row.update(_averaged_metrics(cfg_b, scenarios, model, ctx))
        rows.append(row)
    return rows


def train_smoke(cfg, scenarios=None, steps=50, lr=0.005, clip=None):
    """Plain SGD over the joint loss, cycling the scenario batch.

    Returns (history, model, ctx) where history is one LossBreakdown
    per step, taken before that step's update. `clip` caps the global
    gradient norm (direction preserved); None disables. Non-finite
    losses or gradients abort with a diagnostic rather than training
    on garbage.
    """
    if steps < 1:
        raise ValueError("need at least one step")
    if clip is not None and clip <= 0.0:
        raise ValueError("clip must be positive")
    scenarios = scenarios if scenarios is not None \
        else default_scenarios(cfg)
    scenarios = sorted(scenarios, key=lambda s: s.seed)
    model, ctx = build_model(cfg)
    params = all_params(model, ctx)
    history = []
    for step in range(steps):
        scn = scenarios[step % len(scenarios)]
        tape = ad.GradientTape()
        try:
            _, _, loss = run_pipeline(scn, cfg, model, ctx,
                                      mode="train", tape=tape)
        except ValueError as err:
            if step == 0:
                raise
            raise RuntimeError(
                f"forward pass failed at step {step}, training has "
                f"likely diverged: {err}") from err
        if not math.isfinite(loss.total):
            raise RuntimeError(
                f"non-finite loss at step {step}: {loss}")
        tape.backward(loss.node)
        grads = tape.grads()
        bad = [k for k, g in grads.items()
               if not np.all(np.isfinite(g))]
        if bad:
            raise RuntimeError(
                f"non-finite gradient at step {step} for {bad[:3]}")
        if clip is not None:
            total = math.sqrt(sum(float(np.sum(g * g))
                                  for g in grads.values()))
            if total > clip:
                scale = clip / total
                grads = {k: g * scale for k, g in grads.items()}
        sgd_step(params, grads, lr)
        history.append(loss)
    return history, model, ctx


def reference_smoke_config():
    """The pinned short-training exercise: one fixed scene on an 8x8
    grid with the default 16-dim, 4-expert, top-2 model.

    Returns (config, scenario). 200 plain SGD steps at lr=0.01 with the
    gradient norm clipped to 5 cut the joint loss by well over half and
    keep every expert's pooled load fraction above 1/16; the balance
    weight is raised to 0.3 because a single tiny scene needs stronger
    balance pressure per step than a broad training mix would.
    """
    cfg = RunConfig(seed=12, difficulty=0, grid_h=8, grid_w=8, lam=0.3)
    return cfg, gen_scenario(cfg.seed, cfg.difficulty)


def expert_loads(outputs):
    """Per-expert load fractions pooled over every routing decision in
    one forward pass."""
    stats = outputs["routing"]
    if not stats:
        return np.zeros(0)
    n_experts = stats[0].n_experts
    counts = np.zeros(n_experts)
    total = 0
    for s in stats:
        counts += np.bincount(s.selections.ravel(),
                              minlength=n_experts)
        total += s.selections.size
    return counts / total
