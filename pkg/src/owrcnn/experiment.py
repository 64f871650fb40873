"""Experiment orchestration shared by the command line and the scripts."""
from __future__ import annotations

import csv
import json
import logging
import platform
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .config import RunConfig
from .continual import ExemplarStore, TaskState, run_task
from .datasets import generate_dataset, ingest_coco, save_rasters, write_coco, write_schedule
from .gmm import GmmStore
from .inference import decide, detect_many, region_outputs, write_dump
from .metrics import (
    MetricsReport,
    a_ose,
    evaluate,
    harvest_unknowns,
    known_as_unknown,
    make_frame,
    u_recall,
    unknown_false_positives,
)
from .structures import ClassRegistry, ImageRecord, make_task_view
from .training import base_model, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("task", "u_recall", "map_prev", "map_current", "map_both", "f1i", "a_ose", "wi")
SWEEP_PARAMETERS = ("theta_obj", "theta_conf", "theta_cls")
DEFAULT_GRIDS = {
    "theta_obj": (0.3, 0.4, 0.5, 0.6, 0.65, 0.69, 0.75, 0.8, 0.9),
    "theta_conf": (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.69, 0.8, 0.9),
    "theta_cls": (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.69, 0.8, 0.9),
}


class ExperimentError(RuntimeError):
    """A command could not run as configured."""


# --- synthetic world -----------------------------------------------------


@dataclass
class World:
    # fully labelled image pool per task; task views hide other tasks' labels
    pools: dict[int, list[ImageRecord]]
    test: list[ImageRecord]
    categories: list[dict]


def build_world(cfg: RunConfig) -> World:
    schedule = cfg.task_schedule()
    cfg.scene.check_schedule(schedule)
    pools = {t: generate_dataset(cfg.scene_for(t), cfg.images_per_task) for t in range(1, len(schedule) + 1)}
    test = generate_dataset(cfg.scene_for("test"), cfg.test_images)
    return World(pools, test, cfg.scene.categories())


def _world_files(data_dir: Path, name: str) -> tuple[Path, Path]:
    return data_dir / f"{name}.json", data_dir / f"{name}.npz"


def write_world(world: World, cfg: RunConfig, data_dir) -> None:
    data_dir = Path(data_dir)
    stamp = data_dir / "world.json"
    if stamp.exists():
        previous = json.loads(stamp.read_text())
        if previous.get("world_hash") != world_hash(cfg):
            raise ExperimentError(f"{data_dir} already holds a dataset generated from different settings")
    data_dir.mkdir(parents=True, exist_ok=True)
    for t, pool in world.pools.items():
        ann, arch = _world_files(data_dir, f"train_t{t}")
        write_coco(pool, world.categories, ann)
        save_rasters(pool, arch)
    ann, arch = _world_files(data_dir, "test")
    write_coco(world.test, world.categories, ann)
    save_rasters(world.test, arch)
    write_schedule(cfg.task_schedule(), data_dir / "schedule.json")
    stamp.write_text(json.dumps({"world_hash": world_hash(cfg), "tasks": sorted(world.pools)}, indent=1) + "\n")


def read_world(data_dir, cfg: RunConfig) -> World:
    data_dir = Path(data_dir)
    stamp = data_dir / "world.json"
    if not stamp.exists():
        raise ExperimentError(f"no dataset in {data_dir}; run `owrcnn synth` first")
    meta = json.loads(stamp.read_text())
    schedule = cfg.task_schedule()
    pools = {}
    for t in meta["tasks"]:
        ann, arch = _world_files(data_dir, f"train_t{t}")
        pools[int(t)] = ingest_coco(ann, arch, schedule)
    ann, arch = _world_files(data_dir, "test")
    test = ingest_coco(ann, arch, schedule)
    categories = json.loads(ann.read_text())["categories"]
    return World(pools, test, categories)


def load_or_build_world(cfg: RunConfig) -> World:
    stamp = Path(cfg.data_dir) / "world.json"
    if stamp.exists():
        return read_world(cfg.data_dir, cfg)
    world = build_world(cfg)
    write_world(world, cfg, cfg.data_dir)
    return world


def world_hash(cfg: RunConfig) -> str:
    keep = {k: v for k, v in cfg.to_dict().items() if k in ("scene", "schedule", "schedule_file", "images_per_task",
                                                            "test_images", "foreign_weight", "seed")}
    return RunConfig.from_dict(keep).config_hash()


# --- reproducibility -----------------------------------------------------


def manifest(cfg: RunConfig, command: str, **extra) -> dict:
    import scipy
    import sklearn
    import torch

    return {
        "command": command,
        "config_hash": cfg.config_hash(),
        "seeds": {
            "run": cfg.seed,
            "base_model": cfg.seed,
            "training": cfg.seed,
            "scenes": {str(t): cfg.scene_for(t).seed for t in range(1, len(cfg.task_schedule()) + 1)}
            | {"test": cfg.scene_for("test").seed},
        },
        "base_model": "fixed random initialisation (no natural-image pretraining)",
        "versions": {
            "owrcnn": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "torch": torch.__version__,
            "scipy": scipy.__version__,
            "scikit-learn": sklearn.__version__,
        },
        **extra,
    }


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=_json_default) + "\n")


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialise {type(x).__name__}")


# --- protocol ------------------------------------------------------------


@dataclass
class TaskOutcome:
    state: TaskState
    report: MetricsReport
    detections: dict
    harvest: dict = field(default_factory=dict)


def evaluate_state(state: TaskState, test: Sequence[ImageRecord], cfg: RunConfig) -> tuple[MetricsReport, dict]:
    dets = detect_many(test, state.model, state.registry.known, state.gmms, cfg.thresholds, cfg.detect_options())
    frame = make_frame(test, dets, state.registry, cfg.eval.iou_thr)
    return evaluate(frame, state.registry, cfg.eval.wi_recall), dets


def task_dir(run_dir, t: int) -> Path:
    return Path(run_dir) / f"task_{t}"


def save_task(out: Path, outcome: TaskOutcome, store: ExemplarStore, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    st = outcome.state
    save_checkpoint(out / "checkpoint.pt", st.model, st.registry, cfg.train_config())
    st.gmms.save(out / "gmms.json")
    _write_json(out / "exemplars.json", store.manifest())
    _write_json(out / "metrics.json", outcome.report.to_dict())
    write_dump(out / "detections.jsonl", outcome.detections)
    with open(out / "history.csv", "w", newline="") as fh:
        if st.history:
            w = csv.DictWriter(fh, fieldnames=list(st.history[0]))
            w.writeheader()
            w.writerows(st.history)
    _write_json(
        out / "manifest.json",
        manifest(cfg, command, task=st.task, known=list(st.registry.known),
                 train_images=len(st.train_image_ids), gmm_source_images=len(st.gmm_source_ids),
                 harvest=outcome.harvest),
    )


def run_protocol(cfg: RunConfig, world: World, practical: bool = False, last_task: int | None = None,
                 command: str = "protocol") -> list[TaskOutcome]:
    """Run tasks 1..T, evaluating after each one and writing the per-task run directories.

    In practical mode the data of every task after the first is harvested
    from the previous model's unknown detections on that task's images.
    """
    schedule = cfg.task_schedule()
    last = last_task or len(schedule)
    run_dir = Path(cfg.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(run_dir / "config.json")
    base = base_model(cfg.seed)
    store = ExemplarStore(cfg.exemplar_n, cfg.exemplar_max_fraction)
    ccfg = cfg.continual_config()
    outcomes: list[TaskOutcome] = []
    previous = None
    for t in range(1, last + 1):
        registry = ClassRegistry(schedule, t)
        pool = world.pools[t]
        harvest = {}
        if practical and t > 1:
            dets = detect_many(pool, previous.model, previous.registry.known, previous.gmms, cfg.thresholds,
                               cfg.detect_options())
            h = harvest_unknowns(dets, pool, schedule.classes(t), cfg.eval.practical_iou)
            data = h.records
            full = sum(a.class_id in schedule.classes(t) for r in pool for a in r.annotations)
            harvest = {"unknown_detections": h.unknown_detections, "harvested": h.harvested,
                       "harvest_images": len(h.records), "full_label_instances": full}
            if not data:
                warnings.warn(f"task {t}: empty harvest, training on earlier exemplars only", stacklevel=2)
            log.info("task %d harvest: %s", t, harvest)
        else:
            data = make_task_view(pool, registry, t)
        log.info("task %d: %d training images available", t, len(data))
        state = run_task(t, schedule, lambda _t, d=data: d, base, store, ccfg, previous)
        report, dets = evaluate_state(state, world.test, cfg)
        report.extra.update(harvest)
        report.extra["train_images"] = len(state.train_image_ids)
        outcome = TaskOutcome(state, report, dets, harvest)
        save_task(task_dir(run_dir, t), outcome, store, cfg, command)
        outcomes.append(outcome)
        previous = state
        log.info("task %d: mAP %.3f U-Recall %s A-OSE %d", t, report.map_both or 0.0, report.u_recall, report.a_ose)
    write_tables([o.report for o in outcomes], run_dir)
    _write_json(run_dir / "manifest.json", manifest(cfg, command, tasks=last))
    return outcomes


def load_task(run_dir, t: int) -> TaskState:
    d = task_dir(run_dir, t)
    if not (d / "checkpoint.pt").exists():
        raise ExperimentError(f"no checkpoint for task {t} in {run_dir}")
    model, registry, _ = load_checkpoint(d / "checkpoint.pt")
    return TaskState(t, model, GmmStore.load(d / "gmms.json"), registry, [])


# --- tables and plots ----------------------------------------------------


def table_rows(reports: Sequence[MetricsReport]) -> list[dict]:
    return [{k: getattr(r, k) for k in TABLE_COLUMNS} for r in reports]


def write_tables(reports: Sequence[MetricsReport], out_dir) -> None:
    out_dir = Path(out_dir)
    rows = table_rows(reports)
    with open(out_dir / "table.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(TABLE_COLUMNS))
        w.writeheader()
        w.writerows(rows)
    plot_trend(reports, out_dir / "trend.png")


def plot_trend(reports: Sequence[MetricsReport], path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    tasks = [r.task for r in reports]
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    ax.plot(tasks, [r.map_both or 0.0 for r in reports], "o-", label="mAP (known)")
    ax.plot(tasks, [r.u_recall if r.u_recall is not None else np.nan for r in reports], "s--", label="U-Recall")
    ax.set_xlabel("task")
    ax.set_xticks(tasks)
    ax.set_ylim(0, 1.05)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def collect_reports(run_dir) -> list[MetricsReport]:
    paths = sorted(Path(run_dir).glob("task_*/metrics.json"), key=lambda p: int(p.parent.name.split("_")[1]))
    if not paths:
        raise ExperimentError(f"no metrics files under {run_dir}")
    return [MetricsReport.from_dict(json.loads(p.read_text())) for p in paths]


def ablation_table(run_dirs: Sequence, out_path) -> list[dict]:
    """One row per run directory with U-Recall, A-OSE and mAP / F1 per task."""
    rows = []
    for rd in run_dirs:
        row = {"run": Path(rd).name}
        for r in collect_reports(rd):
            row[f"t{r.task}_u_recall"] = r.u_recall
            row[f"t{r.task}_a_ose"] = r.a_ose
            row[f"t{r.task}_map"] = r.map_both
            row[f"t{r.task}_f1i"] = r.f1i
        rows.append(row)
    keys = list(dict.fromkeys(k for row in rows for k in row))
    with open(out_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        w.writerows(rows)
    return rows


# --- threshold sweeps ----------------------------------------------------


def sweep(state: TaskState, test: Sequence[ImageRecord], cfg: RunConfig, parameter: str,
          grid: Sequence[float] | None = None) -> list[dict]:
    """Inference-only sweep of one threshold; network outputs are computed once."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"cannot sweep {parameter!r}; choose one of {SWEEP_PARAMETERS}")
    grid = tuple(DEFAULT_GRIDS[parameter] if grid is None else grid)
    if not grid:
        raise ValueError("empty grid")
    bad = [g for g in grid if not 0.0 < g < 1.0]
    if bad:
        raise ValueError(f"grid values must lie in (0, 1): {bad}")
    opts = cfg.detect_options()
    regions = region_outputs(state.model, test, opts.k_proposals, opts.agnostic_heads)
    known = state.registry.known
    rows = []
    for value in grid:
        th = replace(cfg.thresholds, **{parameter: float(value)})
        dets = {r.image_id: decide(r, known, state.gmms, th, opts) for r in regions}
        frame = make_frame(test, dets, state.registry, cfg.eval.iou_thr)
        rows.append({
            parameter: float(value),
            "unknown_false_positives": unknown_false_positives(frame),
            "u_recall": u_recall(frame),
            "a_ose": a_ose(frame),
            "known_as_unknown": known_as_unknown(frame),
        })
    for prev, row in zip([None] + rows[:-1], rows):
        if prev is None:
            row["delta_error"] = 0
        else:
            removed = prev["a_ose"] - row["a_ose"]
            introduced = row["known_as_unknown"] - prev["known_as_unknown"]
            row["delta_error"] = removed - introduced
    return rows


def write_sweep(rows: Sequence[dict], parameter: str, out_dir) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / f"sweep_{parameter}.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    xs = [r[parameter] for r in rows]
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2))
    if parameter == "theta_obj":
        axes[0].plot(xs, [r["unknown_false_positives"] for r in rows], "o-")
        axes[0].set_ylabel("false positive unknowns")
        axes[1].plot(xs, [r["u_recall"] or 0.0 for r in rows], "o-")
        axes[1].set_ylabel("U-Recall")
    else:
        axes[0].plot(xs, [r["a_ose"] for r in rows], "o-", label="A-OSE")
        axes[0].plot(xs, [r["known_as_unknown"] for r in rows], "s--", label="known as unknown")
        axes[0].legend()
        axes[1].bar(range(len(xs)), [r["delta_error"] for r in rows])
        axes[1].set_xticks(range(len(xs)), [f"{x:g}" for x in xs], rotation=45)
        axes[1].set_ylabel("delta error")
    for ax in axes:
        ax.set_xlabel(parameter)
    fig.tight_layout()
    fig.savefig(out_dir / f"sweep_{parameter}.png", dpi=120)
    plt.close(fig)


def sign_changes(values: Sequence[float]) -> int:
    """Number of sign flips in a sequence, ignoring zeros."""
    signs = [np.sign(v) for v in values if v != 0]
    return sum(a != b for a, b in zip(signs, signs[1:]))
