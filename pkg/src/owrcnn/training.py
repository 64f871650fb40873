"""Target preparation, the optimisation loop and checkpoints."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .detector import (
    Detector,
    LossBreakdown,
    RoiTargets,
    RpnTargets,
    assign_roi_targets,
    assign_rpn_targets,
    build_exclusion_mask,
    clip_boxes,
    compute_losses,
    concat_roi_targets,
    images_to_tensor,
    pyramid_level,
    realized_iou,
    sample_negative_anchors,
    select_proposals,
)
from .structures import ClassRegistry, ImageRecord, TaskSchedule

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "owrcnn-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 14
    batch_size: int = 8
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_steps: tuple[float, ...] = (0.7, 0.9)
    lr_gamma: float = 0.1
    warmup_iters: int = 50
    grad_clip: float = 10.0
    # proposals kept per image from the first stage
    proposals_train: int = 64
    proposals_test: int = 100
    anchor_sample: int = 64
    roi_batch: int = 48
    fg_fraction: float = 0.4
    gt_jitter: int = 4
    random_proposals: int = 16
    seed: int = 0
    theta_cls: float = 0.5
    theta_obj: float = 0.69
    # "centerness" (class-agnostic) or "classifier" (conventional objectness)
    rpn_mode: str = "centerness"
    agnostic_heads: bool = True
    prior_class_handling: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        self.lr_steps = tuple(self.lr_steps)
        for name in ("epochs", "batch_size", "proposals_train", "proposals_test", "anchor_sample", "roi_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr <= 0 or self.lr_gamma <= 0:
            raise ValueError("rates must be positive")
        if self.rpn_mode not in ("centerness", "classifier"):
            raise ValueError(f"unknown rpn_mode {self.rpn_mode!r}")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class BatchTargets:
    rpn: list[RpnTargets]
    roi: RoiTargets
    mask: np.ndarray | None = None


def _dense_labels(rec: ImageRecord, known: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    index = {c: i for i, c in enumerate(known)}
    boxes = np.array([a.box.as_array() for a in rec.annotations], dtype=np.float64).reshape(-1, 4)
    try:
        labels = np.array([index[a.class_id] for a in rec.annotations], dtype=np.int64)
    except KeyError as err:
        raise ValueError(f"{rec.image_id}: annotation of class {err.args[0]} is not a known class") from err
    return boxes, labels


def nearest_anchor(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Anchor on the box's pyramid level whose centre is closest to the box centre."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if not len(boxes):
        return np.zeros(0, dtype=np.int64)
    levels = pyramid_level(torch.from_numpy(boxes)).numpy()
    strides = np.unique(anchors[:, 2])
    cx = (boxes[:, 0] + boxes[:, 2]) / 2
    cy = (boxes[:, 1] + boxes[:, 3]) / 2
    out = np.empty(len(boxes), dtype=np.int64)
    for i in range(len(boxes)):
        cand = np.flatnonzero(anchors[:, 2] == strides[levels[i]])
        d = (anchors[cand, 0] - cx[i]) ** 2 + (anchors[cand, 1] - cy[i]) ** 2
        out[i] = cand[np.argmin(d)]
    return out


def _jitter(gts: np.ndarray, count: int, rng: np.random.Generator, size: int) -> np.ndarray:
    if count == 0 or not len(gts):
        return np.zeros((0, 4))
    g = np.repeat(gts, count, axis=0)
    w, h = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    cx = (g[:, 0] + g[:, 2]) / 2 + rng.uniform(-0.25, 0.25, len(g)) * w
    cy = (g[:, 1] + g[:, 3]) / 2 + rng.uniform(-0.25, 0.25, len(g)) * h
    w = w * np.exp(rng.uniform(-0.3, 0.3, len(g)))
    h = h * np.exp(rng.uniform(-0.3, 0.3, len(g)))
    return clip_boxes(np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1), size, size)


def _random_boxes(count: int, rng: np.random.Generator, size: int) -> np.ndarray:
    if count == 0:
        return np.zeros((0, 4))
    side = rng.uniform(0.08, 0.45, (count, 2)) * size
    x1 = rng.uniform(0, size - side[:, 0])
    y1 = rng.uniform(0, size - side[:, 1])
    return np.stack([x1, y1, x1 + side[:, 0], y1 + side[:, 1]], axis=1)


def build_targets(
    model: Detector,
    rpn_ctr: np.ndarray,
    rpn_boxes: np.ndarray,
    records: Sequence[ImageRecord],
    known: Sequence[int],
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> BatchTargets:
    """Assign first- and second-stage targets for a batch from detached RPN outputs."""
    anchors = model.anchors.cpu().numpy()
    size = model.image_size
    rpn_t, roi_parts = [], []
    for b, rec in enumerate(records):
        gts, labels = _dense_labels(rec, known)
        t = assign_rpn_targets(anchors, gts, cfg.anchor_sample, rng)
        if cfg.rpn_mode == "classifier":
            t.negative_idx = sample_negative_anchors(anchors, gts, cfg.anchor_sample, rng)
        rpn_t.append(t)

        props = select_proposals(rpn_ctr[b], rpn_boxes[b], cfg.proposals_train, size)
        extra = np.concatenate(
            [gts, _jitter(gts, cfg.gt_jitter, rng, size), _random_boxes(cfg.random_proposals, rng, size)]
        )
        extra_ctr = rpn_ctr[b][nearest_anchor(anchors, extra)]
        boxes = np.concatenate([props.boxes, extra])
        ctr = np.concatenate([props.ctr_logits, extra_ctr])
        roi_parts.append(
            assign_roi_targets(boxes, ctr, gts, labels, len(known), cfg.roi_batch, cfg.fg_fraction, rng)
        )
    return BatchTargets(rpn_t, concat_roi_targets(roi_parts))


def objectness_logits(ctr_logits, iou_logits, agnostic: bool = True) -> np.ndarray:
    """s_obj from the two localisation-quality logits (first-stage probability alone without agnostic heads)."""
    sc = 1.0 / (1.0 + np.exp(-np.asarray(ctr_logits, dtype=np.float64)))
    if not agnostic:
        return sc
    si = 1.0 / (1.0 + np.exp(-np.asarray(iou_logits, dtype=np.float64)))
    return np.sqrt(sc * si)


def loss_with_targets(
    model: Detector,
    images: torch.Tensor,
    records: Sequence[ImageRecord],
    targets: BatchTargets,
    cfg: TrainConfig,
    prior_idx: Sequence[int] = (),
    outputs=None,
) -> LossBreakdown:
    """Loss for fixed targets.

    The IoU-head targets and the exclusion mask are filled in from the
    detached outputs the first time; later calls reuse them, which is what a
    finite-difference check needs.
    """
    rpn, feats = outputs if outputs is not None else model(images)
    roi_t = targets.roi
    props = torch.as_tensor(roi_t.proposals, dtype=rpn.ctr_logits.dtype)
    roi = model.roi_forward(feats, props, torch.as_tensor(roi_t.batch_idx))
    if roi_t.iou_target is None:
        roi_t.iou_target = realized_iou(roi_t.proposals, roi.agnbox.detach().double().numpy(), roi_t.matched_gt)
    if targets.mask is None:
        targets.mask = np.zeros(len(roi_t.labels), dtype=bool)
        if prior_idx and cfg.prior_class_handling:
            s_obj = objectness_logits(roi_t.ctr_logits, roi.iou_logits.detach().double().numpy(), cfg.agnostic_heads)
            for b, rec in enumerate(records):
                sel = roi_t.batch_idx == b
                gts = np.array([a.box.as_array() for a in rec.annotations]).reshape(-1, 4)
                targets.mask[sel] = build_exclusion_mask(
                    roi.cls_logits.detach().double().numpy()[sel],
                    s_obj[sel],
                    roi_t.proposals[sel],
                    gts,
                    prior_idx,
                    cfg.theta_cls,
                    cfg.theta_obj,
                )
    return compute_losses(
        targets.rpn, roi_t, rpn, roi, targets.mask, rpn_mode=cfg.rpn_mode, agnostic_heads=cfg.agnostic_heads
    )


def training_loss(
    model: Detector,
    records: Sequence[ImageRecord],
    known: Sequence[int],
    cfg: TrainConfig,
    rng: np.random.Generator,
    prior_idx: Sequence[int] = (),
) -> tuple[LossBreakdown, BatchTargets]:
    images = images_to_tensor([r.raster for r in records], cfg.torch_dtype)
    rpn, feats = model(images)
    boxes = model.decode_rpn(rpn).detach().double().numpy()
    ctr = rpn.ctr_logits.detach().double().numpy()
    targets = build_targets(model, ctr, boxes, records, known, cfg, rng)
    loss = loss_with_targets(model, images, records, targets, cfg, prior_idx, outputs=(rpn, feats))
    return loss, targets


def _lr_at(step: int, total: int, cfg: TrainConfig) -> float:
    lr = cfg.lr * cfg.lr_gamma ** sum(step >= frac * total for frac in cfg.lr_steps)
    if step < cfg.warmup_iters:
        lr *= (step + 1) / cfg.warmup_iters
    return lr


def train(
    model: Detector,
    dataset: Sequence[ImageRecord],
    cfg: TrainConfig,
    known: Sequence[int],
    prior_classes: Sequence[int] = (),
    history: list | None = None,
) -> Detector:
    """SGD with momentum and step decay over ``dataset``; updates ``model`` in place and returns it.

    ``known`` lists the class ids in dense-index order; ``prior_classes`` are
    the classes of earlier tasks used by the exclusion mask.
    """
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    if any(r.raster is None for r in dataset):
        raise ValueError("every training record needs a raster")
    model.to(cfg.torch_dtype)
    model.train()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    prior_idx = [list(known).index(c) for c in prior_classes]
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.dim() == 1 else decay).append(p)
    opt = torch.optim.SGD(
        [{"params": decay, "weight_decay": cfg.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=cfg.lr,
        momentum=cfg.momentum,
    )
    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for s in range(per_epoch):
            batch = [dataset[i] for i in order[s * cfg.batch_size : (s + 1) * cfg.batch_size]]
            for g in opt.param_groups:
                g["lr"] = _lr_at(step, total, cfg)
            loss, targets = training_loss(model, batch, known, cfg, rng, prior_idx)
            total_loss = loss.total
            if not torch.isfinite(total_loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} step {step}: {loss.as_dict()}"
                )
            opt.zero_grad()
            total_loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
            opt.step()
            if history is not None:
                rec = loss.as_dict()
                rec.update(epoch=epoch, step=step, masked=int(targets.mask.sum()))
                history.append(rec)
            step += 1
        log.debug("epoch %d done, last loss %.4f", epoch, float(total_loss.detach()))
    model.eval()
    return model


# --- model construction and checkpoints ----------------------------------


def base_model(seed: int = 0, **arch) -> Detector:
    """The fixed randomly initialised starting point every task fine-tunes from."""
    return Detector(num_known=1, seed=seed, **arch)


def model_from_base(base: Detector, num_known: int, seed: int | None = None) -> Detector:
    """Copy the class-independent weights of ``base`` into a model sized for ``num_known`` classes."""
    arch = dict(base.arch)
    if seed is not None:
        arch["seed"] = seed
    model = Detector(num_known=num_known, **arch)
    state = {k: v for k, v in base.state_dict().items() if not k.startswith(("cls.", "clsbox."))}
    model.load_state_dict(state, strict=False)
    return model.to(next(base.parameters()).dtype)


def expand_classes(prev: Detector, num_known: int) -> Detector:
    """Grow the class heads of a trained model, keeping the rows of classes it already knows."""
    model = model_from_base(prev, num_known)
    k = prev.num_known
    with torch.no_grad():
        model.cls.weight[:k] = prev.cls.weight[:k]
        model.cls.bias[:k] = prev.cls.bias[:k]
        model.cls.weight[-1] = prev.cls.weight[-1]
        model.cls.bias[-1] = prev.cls.bias[-1]
        model.clsbox.weight[: 4 * k] = prev.clsbox.weight
        model.clsbox.bias[: 4 * k] = prev.clsbox.bias
    return model


def save_checkpoint(path, model: Detector, registry: ClassRegistry, cfg: TrainConfig) -> None:
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "arch": model.arch,
            "num_known": model.num_known,
            "dtype": str(next(model.parameters()).dtype),
            "state_dict": model.state_dict(),
            "registry": {"tasks": [list(t) for t in registry.schedule.tasks], "current_task": registry.current_task},
            "train_config": asdict(cfg),
        },
        Path(path),
    )


def load_checkpoint(path) -> tuple[Detector, ClassRegistry, TrainConfig]:
    blob = torch.load(Path(path), weights_only=False)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a detector checkpoint")
    if blob["version"] > CHECKPOINT_VERSION:
        raise ValueError(f"checkpoint version {blob['version']} is newer than supported")
    model = Detector(num_known=blob["num_known"], **blob["arch"])
    if blob["dtype"] == "torch.float64":
        model.double()
    model.load_state_dict(blob["state_dict"])
    model.eval()
    reg = blob["registry"]
    registry = ClassRegistry(TaskSchedule(tuple(map(tuple, reg["tasks"]))), reg["current_task"])
    return model, registry, TrainConfig(**blob["train_config"])


def clone(model: Detector) -> Detector:
    return copy.deepcopy(model)
