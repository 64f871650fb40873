"""Task loop: exemplar sets, fine-tune-only training from the base model, mixture refresh."""
from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import torch

from .detector import Detector, images_to_tensor
from .gmm import GmmStore, fit_gmms
from .structures import ClassRegistry, ImageRecord, TaskSchedule, make_task_view, merge_views
from .training import TrainConfig, expand_classes, model_from_base, train

log = logging.getLogger(__name__)


class ExemplarWarning(UserWarning):
    pass


@dataclass
class ExemplarSet:
    task: int
    records: list[ImageRecord]
    instance_counts: dict[int, int]
    under_sampled: list[int] = field(default_factory=list)

    @property
    def image_ids(self) -> list[str]:
        return [r.image_id for r in self.records]


def build_exemplar_set(dataset_view: Sequence[ImageRecord], classes: Sequence[int], n: int, task: int = 0) -> ExemplarSet:
    """Class-balanced exemplar sampling with one bounded FIFO queue per class.

    Every instance pushes its image onto its class queue; sampling stops once
    every queue holds ``n`` entries and the distinct queued images are
    returned in dataset order.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    queues = {c: deque(maxlen=n) for c in classes}
    position = {}
    done = False
    for pos, rec in enumerate(dataset_view):
        position[rec.image_id] = pos
        for ann in rec.annotations:
            if ann.class_id in queues:
                queues[ann.class_id].append(rec.image_id)
        if all(len(q) >= n for q in queues.values()):
            done = True
            break
    if not done:
        warnings.warn(
            f"data exhausted before every class reached {n} instances; returning partial queues",
            ExemplarWarning,
            stacklevel=2,
        )
    chosen = sorted({i for q in queues.values() for i in q}, key=position.__getitem__)
    by_id = {r.image_id: r for r in dataset_view}
    records = [by_id[i] for i in chosen]
    counts = {c: sum(a.class_id == c for r in records for a in r.annotations) for c in classes}
    under = [c for c in classes if counts[c] < n]
    for c in classes:
        if counts[c] == 0:
            warnings.warn(f"class {c} has no instances in the task data", ExemplarWarning, stacklevel=2)
    return ExemplarSet(task, records, counts, under)


@dataclass
class ExemplarStore:
    n: int = 15
    max_fraction: float = 0.2
    sets: dict[int, ExemplarSet] = field(default_factory=dict)

    def add(self, ex: ExemplarSet, source_size: int) -> None:
        if len(ex.records) > self.max_fraction * source_size:
            log.warning(
                "exemplar set for task %d holds %d of %d images (> %.0f%%)",
                ex.task, len(ex.records), source_size, 100 * self.max_fraction,
            )
        self.sets[ex.task] = ex

    def union(self, upto: int) -> list[ImageRecord]:
        missing = [u for u in range(1, upto + 1) if u not in self.sets]
        if missing:
            raise KeyError(f"no exemplar set stored for task(s) {missing}")
        return merge_views(*(self.sets[u].records for u in range(1, upto + 1)))

    def manifest(self) -> dict:
        return {
            str(t): {
                "image_ids": ex.image_ids,
                "instance_counts": {str(k): v for k, v in ex.instance_counts.items()},
                "under_sampled": ex.under_sampled,
            }
            for t, ex in sorted(self.sets.items())
        }


@dataclass
class ContinualConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    # epochs used when training on exemplar unions (t > 1); None reuses train.epochs
    finetune_epochs: int | None = 60
    exemplar_n: int = 15
    exemplar_max_fraction: float = 0.2
    gmm_components: int = 1
    gmm_min_samples: int = 10
    fine_tune_only: bool = True


@dataclass
class TaskState:
    task: int
    model: Detector
    gmms: GmmStore
    registry: ClassRegistry
    train_image_ids: list[str]
    gmm_source_ids: list[str] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)


DataProvider = Callable[[int], Sequence[ImageRecord]]


@torch.no_grad()
def collect_gt_logits(model: Detector, records: Sequence[ImageRecord], known: Sequence[int], batch_size: int = 16) -> dict[int, np.ndarray]:
    """Classification logits for every annotated instance, using its own box as the proposal."""
    model.eval()
    dtype = next(model.parameters()).dtype
    out: dict[int, list[np.ndarray]] = {c: [] for c in known}
    for start in range(0, len(records), batch_size):
        chunk = [r for r in records[start : start + batch_size]]
        images = images_to_tensor([r.raster for r in chunk], dtype)
        _, feats = model(images)
        boxes, bidx, labels = [], [], []
        for b, rec in enumerate(chunk):
            for a in rec.annotations:
                if a.class_id in out:
                    boxes.append(a.box.as_array())
                    bidx.append(b)
                    labels.append(a.class_id)
        if not boxes:
            continue
        roi = model.roi_forward(feats, torch.as_tensor(np.array(boxes), dtype=dtype), torch.as_tensor(bidx))
        logits = roi.cls_logits.double().numpy()
        for lab, row in zip(labels, logits):
            out[lab].append(row)
    return {c: np.array(v).reshape(len(v), model.num_known + 1) for c, v in out.items()}


def refresh_gmms(state: TaskState, source: Sequence[ImageRecord], cfg: ContinualConfig) -> TaskState:
    known = state.registry.known
    logits = collect_gt_logits(state.model, source, known)
    store = fit_gmms(logits, cfg.gmm_components, cfg.gmm_min_samples, seed=cfg.train.seed)
    for c in known:
        if c not in store.covers():
            store.bypassed[c] = "no samples"
    return replace(state, gmms=store, gmm_source_ids=[r.image_id for r in source])


def _with_epochs(cfg: TrainConfig, epochs: int | None) -> TrainConfig:
    return cfg if epochs is None else replace(cfg, epochs=epochs)


def run_task(
    t: int,
    schedule: TaskSchedule,
    data_provider: DataProvider,
    base: Detector,
    store: ExemplarStore,
    cfg: ContinualConfig,
    previous: TaskState | None = None,
) -> TaskState:
    """Train the model for task ``t``.

    Task 1 trains on all of its data.  Later tasks restart from ``base`` and
    train only on the union of the stored exemplar sets plus the new one.  With
    ``cfg.fine_tune_only`` off the conventional regime is used instead: the
    previous model is extended, trained on the new data and then fine-tuned on
    the exemplars.
    """
    registry = ClassRegistry(schedule, t)
    known = registry.known
    prior = registry.previously_known if cfg.train.prior_class_handling else ()
    data = list(data_provider(t))
    ex = build_exemplar_set(data, registry.current, store.n, task=t)
    history: list[dict] = []

    if t == 1:
        train_set = data
        model = model_from_base(base, len(known))
        train(model, train_set, cfg.train, known, (), history)
        store.add(ex, len(data))
        gmm_source = data
    else:
        store.union(t - 1)  # raises when earlier exemplars are missing
        store.add(ex, len(data))
        train_set = store.union(t)
        ft_cfg = _with_epochs(cfg.train, cfg.finetune_epochs)
        if cfg.fine_tune_only:
            model = model_from_base(base, len(known))
            train(model, train_set, ft_cfg, known, prior, history)
        else:
            if previous is None:
                raise ValueError("the conventional regime needs the previous task's model")
            model = expand_classes(previous.model, len(known))
            if data:
                train(model, data, cfg.train, known, prior, history)
            train(model, train_set, replace(ft_cfg, lr=cfg.train.lr * 0.1, warmup_iters=0), known, prior, history)
        gmm_source = train_set

    state = TaskState(
        task=t,
        model=model,
        gmms=GmmStore(),
        registry=registry,
        train_image_ids=[r.image_id for r in train_set],
        history=history,
    )
    return refresh_gmms(state, gmm_source, cfg)


def task_views(dataset: Sequence[ImageRecord], schedule: TaskSchedule) -> DataProvider:
    """Provider returning the label view of ``dataset`` for each task."""
    registry = ClassRegistry(schedule, 1)
    return lambda t: make_task_view(dataset, registry, t)
