"""Open-world decision logic on top of the detector outputs.

Per region: the objectness score fuses the two localisation-quality heads,
the unknown branch turns classifier probabilities plus objectness into scores over known
classes, unknown and background, and the mixture check re-labels low-confidence known
predictions whose logits are unlikely under the class mixture.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .detector import Detector, clip_boxes, decode_deltas, images_to_tensor, select_proposals, softmax_np
from .gmm import GmmStore
from .structures import UNKNOWN, BoundingBox, Detection, ImageRecord, iou_matrix

log = logging.getLogger(__name__)

BACKGROUND = -2


@dataclass
class Thresholds:
    theta_obj: float = 0.69
    theta_cls: float = 0.5
    theta_conf: float = 0.05
    baseline_unknown: float = 0.2

    def __post_init__(self):
        for name in ("theta_obj", "theta_cls", "theta_conf", "baseline_unknown"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name}={v} must lie in (0, 1)")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def objectness(ctr_logit, iou_logit):
    s = np.sqrt(sigmoid(ctr_logit) * sigmoid(iou_logit))
    return float(s) if np.ndim(s) == 0 else s


@dataclass
class ClassScores:
    scores: dict[int, float]
    boxes: dict[int, BoundingBox]


def unknown_branch(probs: np.ndarray, s_obj: np.ndarray, th: Thresholds, enabled: bool = True) -> np.ndarray:
    """Vectorised unknown branch on (R, K+1) probabilities; returns (R, K+2) as [known..., unknown, background]."""
    probs = np.asarray(probs, dtype=np.float64)
    s_obj = np.asarray(s_obj, dtype=np.float64)
    r, k1 = probs.shape
    out = np.zeros((r, k1 + 1))
    out[:, : k1 - 1] = probs[:, :-1]
    out[:, -1] = probs[:, -1]
    if enabled:
        fire = np.all(probs[:, :-1] < th.theta_conf, axis=1) & (s_obj > th.theta_obj)
        out[fire, -2] = s_obj[fire]
        out[fire, -1] = 0.0
    return out


def calculate_class_scores_and_boxes(
    cls_logits: np.ndarray,
    class_boxes: np.ndarray,
    agnostic_box: np.ndarray,
    s_obj: float,
    th: Thresholds,
    known: Sequence[int],
) -> ClassScores:
    """Unknown branch for a single region; boxes are already decoded to image coordinates."""
    probs = softmax_np(np.asarray(cls_logits, dtype=np.float64)[None])
    row = unknown_branch(probs, np.array([s_obj]), th)[0]
    scores = {c: float(row[i]) for i, c in enumerate(known)}
    scores[UNKNOWN] = float(row[-2])
    scores[BACKGROUND] = float(row[-1])
    boxes = {c: BoundingBox(*map(float, class_boxes[i])) for i, c in enumerate(known)}
    boxes[UNKNOWN] = BoundingBox(*map(float, agnostic_box))
    return ClassScores(scores, boxes)


def handle_overconfident(
    label: int,
    s_cls: float,
    cls_logits: np.ndarray,
    s_obj: float,
    gmms: GmmStore | None,
    th: Thresholds,
) -> tuple[int, float]:
    """Relabel a low-confidence known prediction as unknown when its logits are unlikely."""
    if label == UNKNOWN or s_cls >= th.theta_cls:
        return label, s_cls
    model = gmms.get(label) if gmms is not None else None
    if model is None:
        log.debug("no mixture for class %s; prediction passes through", label)
        return label, s_cls
    if model.log_likelihood(np.asarray(cls_logits, dtype=np.float64)) < model.theta_like:
        return UNKNOWN, float(s_obj)
    return label, s_cls


# --- non-maximum suppression ---------------------------------------------


def nms_indices(boxes: np.ndarray, scores: np.ndarray, labels: np.ndarray, iou_threshold: float) -> np.ndarray:
    """Greedy per-label suppression; returns kept indices ordered by (-score, index)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.lexsort((np.arange(len(scores)), -scores))
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(scores), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        same = labels == labels[i]
        suppressed |= same & (ious[i] > iou_threshold)
    return np.asarray(keep, dtype=np.int64)


def nms(detections: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    if not detections:
        return []
    boxes = np.array([d.box.as_array() for d in detections])
    keep = nms_indices(boxes, [d.score for d in detections], [d.label for d in detections], iou_threshold)
    return [detections[i] for i in keep]


# --- pipeline ------------------------------------------------------------


@dataclass
class DetectOptions:
    k_proposals: int = 100
    score_floor: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    unknown_branch: bool = True
    gmm_correction: bool = True
    # s_obj from both quality heads; False uses the first-stage probability only
    agnostic_heads: bool = True


@dataclass
class RegionOutputs:
    """Network outputs for the proposals of one image, enough to re-run the decision logic."""

    image_id: str
    cls_logits: np.ndarray  # (R, K+1)
    s_obj: np.ndarray  # (R,)
    class_boxes: np.ndarray  # (R, K, 4)
    agnostic_boxes: np.ndarray  # (R, 4)
    ctr_logits: np.ndarray | None = None  # (R,) first-stage logits of the proposals
    iou_logits: np.ndarray | None = None  # (R,)


@torch.no_grad()
def region_outputs(
    model: Detector,
    records: Sequence[ImageRecord],
    k_proposals: int = 100,
    agnostic_heads: bool = True,
    batch_size: int = 16,
) -> list[RegionOutputs]:
    model.eval()
    dtype = next(model.parameters()).dtype
    size = model.image_size
    out = []
    for start in range(0, len(records), batch_size):
        chunk = records[start : start + batch_size]
        images = images_to_tensor([r.raster for r in chunk], dtype)
        rpn, feats = model(images)
        boxes = model.decode_rpn(rpn).double().numpy()
        ctr = rpn.ctr_logits.double().numpy()
        props, ctrs, bidx = [], [], []
        for b in range(len(chunk)):
            p = select_proposals(ctr[b], boxes[b], k_proposals, size)
            props.append(p.boxes)
            ctrs.append(p.ctr_logits)
            bidx.append(np.full(len(p.boxes), b))
        all_props = np.concatenate(props)
        roi = model.roi_forward(feats, torch.as_tensor(all_props, dtype=dtype), torch.as_tensor(np.concatenate(bidx)))
        logits = roi.cls_logits.double().numpy()
        iou_logits = roi.iou_logits.double().numpy()
        clsbox = roi.clsbox.double().numpy()
        agn = roi.agnbox.double().numpy()
        offset = 0
        for b, rec in enumerate(chunk):
            n = len(props[b])
            sl = slice(offset, offset + n)
            offset += n
            pb = props[b]
            k = clsbox.shape[1]
            cb = decode_deltas(np.repeat(pb, k, axis=0), clsbox[sl].reshape(-1, 4))
            cb = clip_boxes(cb, size, size).reshape(n, k, 4)
            ab = clip_boxes(decode_deltas(pb, agn[sl]), size, size)
            if agnostic_heads:
                s_obj = np.sqrt(sigmoid(ctrs[b]) * sigmoid(iou_logits[sl]))
            else:
                s_obj = sigmoid(ctrs[b])
            out.append(RegionOutputs(rec.image_id, logits[sl], s_obj, cb, ab, ctrs[b], iou_logits[sl]))
    return out


def decide(
    regions: RegionOutputs,
    known: Sequence[int],
    gmms: GmmStore | None,
    th: Thresholds,
    opts: DetectOptions,
) -> list[Detection]:
    """Unknown branch, per-region argmax, mixture relabel, NMS and the score floor for one image."""
    if len(regions.cls_logits) == 0:
        return []
    probs = softmax_np(regions.cls_logits)
    scores = unknown_branch(probs, regions.s_obj, th, enabled=opts.unknown_branch)
    k = len(known)
    best = np.argmax(scores, axis=1)
    labels, vals, boxes, prov = [], [], [], []
    for r, j in enumerate(best):
        if j == k + 1:  # background is never emitted
            continue
        if j == k:
            labels.append(UNKNOWN)
            vals.append(scores[r, k])
            boxes.append(regions.agnostic_boxes[r])
            prov.append("objectness")
            continue
        label, score = known[j], float(scores[r, j])
        if opts.gmm_correction:
            label, score = handle_overconfident(label, score, regions.cls_logits[r], regions.s_obj[r], gmms, th)
        labels.append(label)
        vals.append(score)
        # the relabel keeps the class-specific box
        boxes.append(regions.class_boxes[r, j])
        prov.append("objectness" if label == UNKNOWN else "classifier")
    if not labels:
        return []
    boxes = np.asarray(boxes)
    vals = np.clip(np.asarray(vals), 0.0, 1.0)
    keep = nms_indices(boxes, vals, np.asarray(labels), opts.nms_iou)
    dets = [
        Detection(int(labels[i]), float(vals[i]), BoundingBox(*map(float, boxes[i])), prov[i])
        for i in keep
        if vals[i] >= opts.score_floor
    ]
    return dets[: opts.max_detections]


def detect(
    raster: np.ndarray,
    model: Detector,
    known: Sequence[int],
    gmms: GmmStore | None,
    th: Thresholds,
    opts: DetectOptions | None = None,
) -> list[Detection]:
    opts = opts or DetectOptions()
    rec = ImageRecord("_", raster.shape[1], raster.shape[0], raster=raster)
    regions = region_outputs(model, [rec], opts.k_proposals, opts.agnostic_heads)[0]
    return decide(regions, known, gmms, th, opts)


def detect_many(
    records: Sequence[ImageRecord],
    model: Detector,
    known: Sequence[int],
    gmms: GmmStore | None,
    th: Thresholds,
    opts: DetectOptions | None = None,
) -> dict[str, list[Detection]]:
    opts = opts or DetectOptions()
    regions = region_outputs(model, records, opts.k_proposals, opts.agnostic_heads)
    return {r.image_id: decide(r, known, gmms, th, opts) for r in regions}


def threshold_relabel(detections: Iterable[Detection], th: Thresholds) -> list[Detection]:
    """Conventional-detector baseline rule: low-confidence known detections become unknown."""
    out = []
    for d in detections:
        if d.label != UNKNOWN and d.score < th.baseline_unknown:
            d = Detection(UNKNOWN, d.score, d.box, d.provenance)
        out.append(d)
    return out


def baseline_threshold_detect(
    raster: np.ndarray,
    model: Detector,
    known: Sequence[int],
    th: Thresholds,
    opts: DetectOptions | None = None,
) -> list[Detection]:
    opts = opts or DetectOptions()
    plain = DetectOptions(**{**opts.__dict__, "unknown_branch": False, "gmm_correction": False})
    return threshold_relabel(detect(raster, model, known, None, th, plain), th)


# --- detection dump ------------------------------------------------------


def detection_to_json(image_id: str, d: Detection) -> dict:
    return {
        "image_id": image_id,
        "label": "unknown" if d.label == UNKNOWN else int(d.label),
        "score": float(d.score),
        "box": [float(v) for v in d.box.to_xywh()],
        "provenance": d.provenance,
    }


def write_dump(path, detections: dict[str, list[Detection]]) -> None:
    with open(path, "w") as fh:
        for image_id in detections:
            for d in detections[image_id]:
                fh.write(json.dumps(detection_to_json(image_id, d)) + "\n")


class DumpError(ValueError):
    pass


def read_dump(path) -> dict[str, list[Detection]]:
    out: dict[str, list[Detection]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
            label = UNKNOWN if row["label"] == "unknown" else int(row["label"])
            det = Detection(
                label, float(row["score"]), BoundingBox.from_xywh(*row["box"]), row.get("provenance", "classifier")
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as err:
            raise DumpError(f"{path}:{lineno}: {err}") from err
        out.setdefault(str(row["image_id"]), []).append(det)
    return out
