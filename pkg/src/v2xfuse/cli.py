"""Command-line front end: scene runs, ablations, bandwidth sweeps,
gradient checks, smoke training, and standalone metric/bandwidth tools.

Every input file is JSON. On success the exit code is 0; any failure
prints one machine-readable object to stderr, shaped
`{"error": {"type": <exception class>, "message": <text>}}`, and exits
nonzero. Tabular results are written both as JSON (full float
precision, sorted keys, so equal results are byte-equal) and as CSV.

File schemas
------------
Run config (``simulate --config``, ``sweep --config``,
``train-smoke --config``): one JSON object whose keys are RunConfig
fields; unknown keys are rejected. ``budget: null`` means an unlimited
channel. Example:

    {"seed": 7, "grid_h": 8, "grid_w": 8, "experts": 4, "k": 2,
     "lam": 0.03, "budget": 1500.0, "p_level": true, "m_level": true}

Ablation grid (``ablate --grid``):

    {"base": { ...run config... }, "scenario_count": 2}

The four cooperation/MoE toggles of ``base`` are ignored; the grid
enumerates all 16 combinations.

Detections (``metrics --pred``): ``{"detections": [{"center": [x, y],
"score": 0.9, "track_id": 0, "extent": [4.0, 1.8], "heading": 0.0},
...]}`` where score/track_id/extent/heading are optional. Ground truth
(``metrics --gt``): ``{"objects": [{"center": [x, y], "track_id": 0},
...]}``.

Messages (``bps --messages``): ``{"freq": 2.0, "messages": [...]}``
where each entry is either a query payload ``{"kind": "track"|"map"|
"motion", "sender": 0, "timestamp_ms": 0, "queries": [[...], ...],
"refs": [[x, y], ...], "scores": [...]}`` or an occupancy payload
``{"kind": "occ", "sender": 1, "timestamp_ms": 0, "grid": {"probs":
[[...], ...], "cell_size": 4.0, "origin": [x, y], "tau": 0.1}}``.
"""

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import comm, harness, metrics
from .checks import GRAD_TOLERANCE, gradient_suite
from .model import save_params
from .occupancy import OccupancyGrid
from .pipeline import RunConfig, all_params, build_model, run_pipeline
from .scenario import gen_scenario


def _load_json(path, what):
    try:
        with open(path, "r", encoding="utf-8") as fp:
            return json.load(fp)
    except FileNotFoundError:
        raise ValueError(f"{what} file not found: {path}")
    except json.JSONDecodeError as err:
        raise ValueError(f"{what} file is not valid JSON: {err}")


def _load_config(path):
    if path is None:
        return RunConfig()
    obj = _load_json(path, "config")
    if not isinstance(obj, dict):
        raise ValueError("config file must hold one JSON object")
    return RunConfig.from_dict(obj)


def _jsonable(val):
    if isinstance(val, dict):
        return {k: _jsonable(v) for k, v in val.items()}
    if isinstance(val, (list, tuple)):
        return [_jsonable(v) for v in val]
    if isinstance(val, np.ndarray):
        return [_jsonable(v) for v in val.tolist()]
    if isinstance(val, (np.bool_, bool)):
        return bool(val)
    if isinstance(val, (np.integer, int)):
        return int(val)
    if isinstance(val, (np.floating, float)):
        v = float(val)
        return None if math.isinf(v) else v
    return val


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(_jsonable(obj), fp, indent=2, sort_keys=True)
        fp.write("\n")


def _write_csv(path, rows):
    if not rows:
        raise ValueError("no rows to write")
    with open(path, "w", encoding="utf-8", newline="") as fp:
        writer = csv.DictWriter(fp, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _loss_dict(loss):
    out = loss.terms()
    out["total"] = loss.total
    return out


def _cmd_simulate(args):
    cfg = _load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    scn = gen_scenario(cfg.seed, cfg.difficulty)
    t0 = time.perf_counter()
    model, ctx = build_model(cfg)
    outputs, rep, loss = run_pipeline(scn, cfg, model, ctx)
    elapsed = time.perf_counter() - t0
    flat = harness.flatten_report(rep)
    out = _out_dir(args)
    _write_json(out / "report.json", {
        "config": cfg.to_dict(),
        "metrics": flat,
        "loss": _loss_dict(loss),
        "bps": outputs["bps"],
    })
    _write_csv(out / "report.csv", [flat])
    print(f"simulate: seed {cfg.seed} done in {elapsed:.2f}s, "
          f"report in {out}", file=sys.stderr)
    return 0


def _cmd_ablate(args):
    obj = _load_json(args.grid, "grid")
    if not isinstance(obj, dict):
        raise ValueError("grid file must hold one JSON object")
    unknown = set(obj) - {"base", "scenario_count"}
    if unknown:
        raise ValueError(f"unknown grid keys: {sorted(unknown)}")
    base = RunConfig.from_dict(obj.get("base", {}))
    count = int(obj.get("scenario_count", 2))
    scenarios = harness.default_scenarios(base, count)
    rows = harness.ablate(harness.toggle_grid(base), scenarios)
    out = _out_dir(args)
    _write_json(out / "ablation.json",
                {"base": base.to_dict(), "rows": rows})
    _write_csv(out / "ablation.csv", harness.ablation_table(rows))
    print(f"ablate: {len(rows)} rows in {out}", file=sys.stderr)
    return 0


def _parse_budgets(text):
    vals = []
    for piece in text.split(","):
        piece = piece.strip()
        if not piece:
            continue
        vals.append(math.inf if piece.lower() in ("inf", "none")
                    else float(piece))
    if not vals:
        raise ValueError("no budgets given")
    return vals


def _cmd_sweep(args):
    cfg = _load_config(args.config)
    budgets = _parse_budgets(args.budgets)
    scenarios = harness.default_scenarios(cfg, args.scenarios)
    rows = harness.bandwidth_sweep(budgets, cfg, scenarios)
    out = _out_dir(args)
    _write_json(out / "sweep.json",
                {"config": cfg.to_dict(), "rows": rows})
    _write_csv(out / "sweep.csv", rows)
    print(f"sweep: {len(rows)} budgets in {out}", file=sys.stderr)
    return 0


def _cmd_gradcheck(args):
    t0 = time.perf_counter()
    results = gradient_suite()
    elapsed = time.perf_counter() - t0
    rows = [{"name": name, "max_rel_err": float(err),
             "pass": bool(err < GRAD_TOLERANCE)}
            for name, err in results]
    ok = all(r["pass"] for r in rows)
    print(json.dumps(_jsonable({
        "tolerance": GRAD_TOLERANCE,
        "seconds": round(elapsed, 3),
        "checks": rows,
        "pass": ok,
    }), indent=2, sort_keys=True))
    return 0 if ok else 1


def _cmd_train_smoke(args):
    if args.config is not None:
        cfg = _load_config(args.config)
        scenarios = harness.default_scenarios(cfg)
    else:
        cfg, scn = harness.reference_smoke_config()
        scenarios = [scn]
    clip = args.clip if args.clip > 0 else None
    history, model, ctx = harness.train_smoke(
        cfg, scenarios, steps=args.steps, lr=args.lr, clip=clip)
    outputs, _, _ = run_pipeline(scenarios[0], cfg, model, ctx)
    loads = harness.expert_loads(outputs)
    first, last = history[0].total, history[-1].total
    out = _out_dir(args)
    rows = [{"step": i, **_loss_dict(lb)}
            for i, lb in enumerate(history)]
    summary = {
        "config": cfg.to_dict(),
        "steps": args.steps,
        "lr": args.lr,
        "clip": clip,
        "first_loss": first,
        "final_loss": last,
        "drop_fraction": 1.0 - last / first,
        "expert_loads": loads,
    }
    _write_json(out / "smoke.json", {**summary, "history": rows})
    _write_csv(out / "smoke.csv", rows)
    save_params(out / "checkpoint.bin", all_params(model, ctx))
    print(f"train-smoke: loss {first:.3f} -> {last:.3f} "
          f"({100 * summary['drop_fraction']:.0f}% drop), "
          f"min load {loads.min():.3f}, outputs in {out}",
          file=sys.stderr)
    return 0


def _detections(entries, what):
    out = []
    for i, e in enumerate(entries):
        if not isinstance(e, dict) or "center" not in e:
            raise ValueError(f"{what}[{i}] needs a 'center' field")
        out.append(metrics.Detection(
            center=e["center"],
            extent=tuple(e.get("extent", (4.0, 1.8))),
            heading=float(e.get("heading", 0.0)),
            score=float(e.get("score", 1.0)),
            track_id=e.get("track_id", i)))
    return out


def _cmd_metrics(args):
    pred_obj = _load_json(args.pred, "pred")
    gt_obj = _load_json(args.gt, "gt")
    if "detections" not in pred_obj:
        raise ValueError("pred file needs a 'detections' list")
    if "objects" not in gt_obj:
        raise ValueError("gt file needs an 'objects' list")
    preds = _detections(pred_obj["detections"], "detections")
    gts = _detections(gt_obj["objects"], "objects")
    report = {
        "n_pred": len(preds),
        "n_gt": len(gts),
        "map_iou": metrics.map_score(preds, gts),
        "map_center": metrics.map_score(
            preds, gts, thresholds=[0.5, 1.0, 2.0, 4.0],
            criterion="center"),
        "amota": metrics.amota([preds], [gts]),
    }
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0


def _message_from_dict(entry, i):
    if not isinstance(entry, dict) or "kind" not in entry:
        raise ValueError(f"messages[{i}] needs a 'kind' field")
    kind = entry["kind"]
    sender = int(entry.get("sender", 0))
    ts = int(entry.get("timestamp_ms", 0))
    if kind == "occ":
        g = entry.get("grid")
        if not isinstance(g, dict) or "probs" not in g:
            raise ValueError(f"messages[{i}] occ entry needs grid.probs")
        grid = OccupancyGrid(np.asarray(g["probs"], dtype=np.float64),
                             float(g.get("cell_size", 4.0)),
                             np.asarray(g.get("origin", (0.0, 0.0))),
                             float(g.get("tau", 0.1)))
        return comm.V2XMessage(kind, sender, ts, grid=grid)
    for field in ("queries", "refs", "scores"):
        if field not in entry:
            raise ValueError(f"messages[{i}] needs '{field}'")
    return comm.V2XMessage(
        kind, sender, ts,
        queries=np.asarray(entry["queries"], dtype=np.float64),
        refs=np.asarray(entry["refs"], dtype=np.float64),
        scores=np.asarray(entry["scores"], dtype=np.float64))


def _cmd_bps(args):
    obj = _load_json(args.messages, "messages")
    if not isinstance(obj, dict) or "messages" not in obj:
        raise ValueError("messages file needs a 'messages' list")
    freq = float(obj.get("freq", 2.0))
    msgs = [_message_from_dict(e, i)
            for i, e in enumerate(obj["messages"])]
    report = {
        "freq": freq,
        "per_message": [{"kind": m.kind, "count": m.count,
                         "payload_bytes": m.payload_bytes()}
                        for m in msgs],
        "total_payload_bytes": sum(m.payload_bytes() for m in msgs),
        "bps": comm.bps(msgs, freq),
    }
    print(json.dumps(_jsonable(report), indent=2, sort_keys=True))
    return 0


def build_parser():
    p = argparse.ArgumentParser(
        prog="v2xfuse",
        description="Cooperative perception/prediction experiments on "
                    "synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True)

    ps = sub.add_parser("simulate",
                        help="run one scene and emit its metric report")
    ps.add_argument("--seed", type=int, default=None,
                    help="override the config seed")
    ps.add_argument("--config", default=None, help="run config JSON")
    ps.add_argument("--out", required=True, help="output directory")
    ps.set_defaults(fn=_cmd_simulate)

    pa = sub.add_parser("ablate",
                        help="run the 16-row cooperation/MoE toggle grid")
    pa.add_argument("--grid", required=True, help="grid file JSON")
    pa.add_argument("--out", default=".", help="output directory")
    pa.set_defaults(fn=_cmd_ablate)

    pw = sub.add_parser("sweep",
                        help="metrics across channel budgets")
    pw.add_argument("--budgets", required=True,
                    help="comma-separated bytes/frame caps, ascending; "
                         "'inf' allowed")
    pw.add_argument("--config", default=None, help="run config JSON")
    pw.add_argument("--scenarios", type=int, default=2,
                    help="scenario batch size")
    pw.add_argument("--out", default=".", help="output directory")
    pw.set_defaults(fn=_cmd_sweep)

    pg = sub.add_parser("gradcheck",
                        help="finite-difference gradient suite")
    pg.set_defaults(fn=_cmd_gradcheck)

    pt = sub.add_parser("train-smoke",
                        help="short SGD run on one scene batch")
    pt.add_argument("--steps", type=int, default=200)
    pt.add_argument("--lr", type=float, default=0.01)
    pt.add_argument("--clip", type=float, default=5.0,
                    help="global gradient-norm cap; <= 0 disables")
    pt.add_argument("--config", default=None,
                    help="run config JSON (default: the pinned "
                         "reference exercise)")
    pt.add_argument("--out", default=".", help="output directory")
    pt.set_defaults(fn=_cmd_train_smoke)

    pm = sub.add_parser("metrics",
                        help="detection metrics for prediction/truth files")
    pm.add_argument("--pred", required=True, help="detections JSON")
    pm.add_argument("--gt", required=True, help="ground-truth JSON")
    pm.set_defaults(fn=_cmd_metrics)

    pb = sub.add_parser("bps",
                        help="bandwidth accounting for a message file")
    pb.add_argument("--messages", required=True, help="messages JSON")
    pb.set_defaults(fn=_cmd_bps)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except BrokenPipeError:
        return 1
    except Exception as err:
        obj = {"error": {"type": type(err).__name__, "message": str(err)}}
        print(json.dumps(obj), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
