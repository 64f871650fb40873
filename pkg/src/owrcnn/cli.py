"""Command line entry point: ``owrcnn <verb> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .config import RunConfig
from .datasets import SceneError, ingest_coco
from .inference import DumpError, read_dump
from .metrics import evaluate, make_frame
from .structures import ClassRegistry
from .training import TrainingDiverged

log = logging.getLogger("owrcnn")

EXPECTED_ERRORS = (ex.ExperimentError, ValueError, KeyError, FileNotFoundError, DumpError, TrainingDiverged, SceneError)


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def cmd_synth(args) -> int:
    cfg = _config(args)
    if args.out:
        cfg = replace(cfg, data_dir=args.out)
    world = ex.build_world(cfg)
    ex.write_world(world, cfg, cfg.data_dir)
    cfg.save(Path(cfg.data_dir) / "config.json")
    ex._write_json(Path(cfg.data_dir) / "manifest.json", ex.manifest(cfg, "synth", world_hash=ex.world_hash(cfg)))
    n = sum(len(p) for p in world.pools.values())
    print(f"wrote {n} training images in {len(world.pools)} pools and {len(world.test)} test images to {cfg.data_dir}")
    return 0


def _run(args, practical: bool) -> int:
    cfg = _config(args)
    if args.out:
        cfg = replace(cfg, run_dir=args.out)
    world = ex.load_or_build_world(cfg)
    outcomes = ex.run_protocol(cfg, world, practical=practical, last_task=args.task,
                               command="practical" if practical else "protocol")
    for o in outcomes:
        r = o.report
        line = f"task {r.task}: mAP {_fmt(r.map_both)}  U-Recall {_fmt(r.u_recall)}  A-OSE {r.a_ose}  WI {_fmt(r.wi)}"
        if o.harvest:
            line += f"  harvested {o.harvest['harvested']}/{o.harvest['unknown_detections']}"
        print(line)
    print(f"results in {cfg.run_dir}")
    return 0


def cmd_protocol(args) -> int:
    return _run(args, practical=False)


def cmd_practical(args) -> int:
    return _run(args, practical=True)


def cmd_sweep(args) -> int:
    cfg = _config(args)
    run_dir = args.run or cfg.run_dir
    run_cfg_path = Path(run_dir) / "config.json"
    if not args.config and run_cfg_path.exists():
        cfg = RunConfig.load(run_cfg_path)
    t = args.task or 1
    state = ex.load_task(run_dir, t)
    world = ex.load_or_build_world(cfg)
    grid = [float(v) for v in args.grid.split(",")] if args.grid else None
    rows = ex.sweep(state, world.test, cfg, args.parameter, grid)
    out = Path(args.out) if args.out else Path(run_dir) / "sweeps"
    ex.write_sweep(rows, args.parameter, out)
    ex._write_json(out / f"manifest_{args.parameter}.json",
                   ex.manifest(cfg, "sweep", task=t, parameter=args.parameter, grid=[r[args.parameter] for r in rows]))
    for r in rows:
        print("  ".join(f"{k}={_fmt(v)}" for k, v in r.items()))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    schedule = cfg.task_schedule()
    t = args.task or 1
    registry = ClassRegistry(schedule, t)
    records = ingest_coco(args.gt, None, schedule)
    dets = read_dump(args.dump)
    unknown_ids = set(dets) - {r.image_id for r in records}
    if unknown_ids:
        raise ValueError(f"dump refers to {len(unknown_ids)} image(s) missing from {args.gt}")
    report = evaluate(make_frame(records, dets, registry, cfg.eval.iou_thr), registry, cfg.eval.wi_recall)
    doc = report.to_dict()
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        ex._write_json(out / "metrics.json", doc)
        ex._write_json(out / "manifest.json", ex.manifest(cfg, "eval", gt=str(args.gt), dump=str(args.dump), task=t))
    print(json.dumps(doc, indent=1, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    cfg = _config(args)
    runs = args.runs or [cfg.run_dir]
    out = Path(args.out) if args.out else Path(runs[0])
    out.mkdir(parents=True, exist_ok=True)
    if len(runs) == 1:
        reports = ex.collect_reports(runs[0])
        ex.write_tables(reports, out)
        for row in ex.table_rows(reports):
            print("  ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    else:
        rows = ex.ablation_table(runs, out / "ablation.csv")
        for row in rows:
            print("  ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    ex._write_json(out / "manifest_report.json", ex.manifest(cfg, "report", runs=[str(r) for r in runs]))
    return 0


def _fmt(v) -> str:
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (JSON)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory of the command")
    common.add_argument("--task", type=int, help="task index for single-task operations")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="owrcnn", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    sub.add_parser("synth", parents=[common], help="generate the synthetic dataset").set_defaults(fn=cmd_synth)
    p = sub.add_parser("protocol", parents=[common], help="run the task protocol (tasks 1..--task)")
    p.set_defaults(fn=cmd_protocol)
    p = sub.add_parser("practical", parents=[common], help="run the protocol with harvested training data")
    p.set_defaults(fn=cmd_practical)
    p = sub.add_parser("sweep", parents=[common], help="inference-only threshold sweep of a trained task")
    p.add_argument("--parameter", required=True, choices=ex.SWEEP_PARAMETERS)
    p.add_argument("--grid", help="comma separated values in (0, 1)")
    p.add_argument("--run", help="run directory holding the task checkpoints")
    p.set_defaults(fn=cmd_sweep)
    p = sub.add_parser("eval", parents=[common], help="score a detection dump against a COCO-style file")
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--dump", required=True, type=Path)
    p.set_defaults(fn=cmd_eval)
    p = sub.add_parser("report", parents=[common], help="tables and plots from finished runs")
    p.add_argument("--runs", nargs="+", help="run directories; several give an ablation table")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except EXPECTED_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
