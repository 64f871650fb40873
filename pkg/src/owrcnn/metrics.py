"""Open-world evaluation: VOC-2010 AP, U-Recall, A-OSE, Wilderness Impact, F1 and unknown precision.

Ground truth at task t is split into known-class boxes (classes of tasks 1..t)
and the unknown pool (classes of later tasks).  Matching is greedy and
one-to-one by descending score.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .structures import UNKNOWN, Annotation, ClassRegistry, Detection, ImageRecord, iou_matrix

log = logging.getLogger(__name__)

METRICS_RULES_VERSION = 1


@dataclass
class EvalFrame:
    image_ids: list[str]
    known_gts: dict[str, list[Annotation]]
    unknown_gts: dict[str, list[Annotation]]
    detections: dict[str, list[Detection]]
    iou_thr: float = 0.5

    def __post_init__(self):
        for i in self.image_ids:
            self.known_gts.setdefault(i, [])
            self.unknown_gts.setdefault(i, [])
            self.detections.setdefault(i, [])


def make_frame(
    records: Sequence[ImageRecord],
    detections: Mapping[str, Sequence[Detection]],
    registry: ClassRegistry,
    iou_thr: float = 0.5,
) -> EvalFrame:
    known, unknown = set(registry.known), set(registry.unknown)
    return EvalFrame(
        image_ids=[r.image_id for r in records],
        known_gts={r.image_id: [a for a in r.annotations if a.class_id in known] for r in records},
        unknown_gts={r.image_id: [a for a in r.annotations if a.class_id in unknown] for r in records},
        detections={r.image_id: list(detections.get(r.image_id, ())) for r in records},
        iou_thr=iou_thr,
    )


def _boxes(items) -> np.ndarray:
    return np.array([x.box.as_array() for x in items], dtype=np.float64).reshape(-1, 4)


def _by_score(dets: Sequence[Detection]) -> list[int]:
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))


def match_detections(
    dets: Sequence[Detection], gts: Sequence[Annotation], iou_thr: float = 0.5, ignore_labels: bool = False
) -> tuple[list[int], np.ndarray]:
    """Greedy one-to-one matching of detections already sorted by descending score.

    Returns, per detection, the matched gt index (-1 for a false positive) and
    a per-gt matched flag.  Each detection takes the highest-IoU unmatched gt
    of its own label with IoU >= ``iou_thr``.
    """
    ious = iou_matrix(_boxes(dets), _boxes(gts))
    matched = np.zeros(len(gts), dtype=bool)
    outcome = []
    for i, d in enumerate(dets):
        best, best_iou = -1, -1.0
        for j, g in enumerate(gts):
            if matched[j] or (not ignore_labels and g.class_id != d.label):
                continue
            if ious[i, j] >= iou_thr and ious[i, j] > best_iou:
                best, best_iou = j, ious[i, j]
        if best >= 0:
            matched[best] = True
        outcome.append(best)
    return outcome, matched


def average_precision_voc2010(tp: Sequence[bool], scores: Sequence[float], n_gt: int) -> float | None:
    """All-points interpolated AP; ``None`` when the class has no ground truth."""
    if n_gt == 0:
        return None
    tp = np.asarray(tp, dtype=bool)
    if tp.size == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    rec = ctp / n_gt
    prec = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).eps)
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _class_stream(frame: EvalFrame, cls: int):
    """TP flags, scores and open-set flags for every detection of ``cls`` across the frame."""
    tps, scores, open_set = [], [], []
    n_gt = 0
    for im in frame.image_ids:
        gts = [g for g in frame.known_gts[im] if g.class_id == cls]
        n_gt += len(gts)
        dets = [d for d in frame.detections[im] if d.label == cls]
        dets = [dets[i] for i in _by_score(dets)]
        outcome, _ = match_detections(dets, gts, frame.iou_thr)
        unk = frame.unknown_gts[im]
        hits = iou_matrix(_boxes(dets), _boxes(unk)).max(axis=1) >= frame.iou_thr if unk else np.zeros(len(dets), bool)
        for d, o, h in zip(dets, outcome, hits):
            tps.append(o >= 0)
            scores.append(d.score)
            open_set.append(o < 0 and bool(h))
    return np.asarray(tps, dtype=bool), np.asarray(scores, dtype=np.float64), np.asarray(open_set, dtype=bool), n_gt


def per_class_ap(frame: EvalFrame, classes: Sequence[int]) -> dict[int, float | None]:
    out = {}
    for c in classes:
        tp, scores, _, n_gt = _class_stream(frame, c)
        out[c] = average_precision_voc2010(tp, scores, n_gt)
        if out[c] is None:
            log.info("class %s has no ground truth; excluded from mAP", c)
    return out


def mean_ap(aps: Mapping[int, float | None], classes: Sequence[int]) -> float | None:
    vals = [aps[c] for c in classes if aps.get(c) is not None]
    return float(np.mean(vals)) if vals else None


def _unknown_stream(frame: EvalFrame):
    tps, scores = [], []
    pool = 0
    for im in frame.image_ids:
        gts = frame.unknown_gts[im]
        pool += len(gts)
        dets = [d for d in frame.detections[im] if d.label == UNKNOWN]
        dets = [dets[i] for i in _by_score(dets)]
        outcome, _ = match_detections(dets, gts, frame.iou_thr, ignore_labels=True)
        tps += [o >= 0 for o in outcome]
        scores += [d.score for d in dets]
    return np.asarray(tps, dtype=bool), np.asarray(scores, dtype=np.float64), pool


def u_recall(frame: EvalFrame) -> float | None:
    tp, _, pool = _unknown_stream(frame)
    if pool == 0:
        return None
    return float(tp.sum()) / pool


def unknown_false_positives(frame: EvalFrame) -> int:
    """Unknown-labelled detections that do not match an unknown-pool object."""
    tp, _, _ = _unknown_stream(frame)
    return int((~tp).sum())


def known_as_unknown(frame: EvalFrame) -> int:
    """Unknown-labelled detections lying on a known-class object (IoU >= threshold)."""
    count = 0
    for im in frame.image_ids:
        dets = [d for d in frame.detections[im] if d.label == UNKNOWN]
        gts = frame.known_gts[im]
        if dets and gts:
            count += int((iou_matrix(_boxes(dets), _boxes(gts)).max(axis=1) >= frame.iou_thr).sum())
    return count


def a_ose(frame: EvalFrame) -> int:
    """Known-labelled detections that are not known-class TPs but overlap an unknown-pool object."""
    classes = sorted({d.label for dets in frame.detections.values() for d in dets if d.label != UNKNOWN})
    return int(sum(_class_stream(frame, c)[2].sum() for c in classes))


def wilderness_impact(frame: EvalFrame, classes: Sequence[int], recall_level: float = 0.8) -> float | None:
    """P_closed / P_open - 1 at the first operating point reaching ``recall_level`` per class."""
    tp_sum = fp_closed = fp_open = 0
    reached = False
    for c in classes:
        tp, scores, open_set, n_gt = _class_stream(frame, c)
        if n_gt == 0 or tp.size == 0:
            continue
        order = np.argsort(-scores, kind="stable")
        tp, open_set = tp[order], open_set[order]
        rec = np.cumsum(tp) / n_gt
        hit = np.flatnonzero(rec >= recall_level - 1e-12)
        if hit.size == 0:
            continue
        cut = hit[0] + 1
        reached = True
        tp_sum += int(tp[:cut].sum())
        fp_open += int(open_set[:cut].sum())
        fp_closed += int((~tp[:cut] & ~open_set[:cut]).sum())
    if not reached:
        return None
    p_closed = tp_sum / (tp_sum + fp_closed)
    p_open = tp_sum / (tp_sum + fp_closed + fp_open)
    return p_closed / p_open - 1.0


def f1i(prev_map: float, cur_map: float) -> float:
    if prev_map < 0 or cur_map < 0:
        raise ValueError("mAP values must be non-negative")
    if prev_map + cur_map == 0:
        return 0.0
    return 2 * prev_map * cur_map / (prev_map + cur_map)


def unknown_precision(frame: EvalFrame) -> tuple[float | None, float | None, float | None]:
    """(precision, recall, AP50) of unknown-labelled detections against the unknown pool.

    Precision is a lower bound in practice: unknown detections of objects that
    were never labelled count as false positives.
    """
    tp, scores, pool = _unknown_stream(frame)
    precision = float(tp.mean()) if tp.size else None
    recall = float(tp.sum()) / pool if pool else None
    return precision, recall, average_precision_voc2010(tp, scores, pool)


@dataclass
class MetricsReport:
    task: int
    per_class_ap: dict[int, float | None]
    map_prev: float | None
    map_current: float | None
    map_both: float | None
    u_recall: float | None
    a_ose: int
    wi: float | None
    f1i: float | None
    unknown_precision: float | None
    unknown_recall: float | None
    unknown_ap: float | None
    unknown_false_positives: int
    known_as_unknown: int
    n_images: int
    n_detections: int
    n_unknown_gt: int
    iou_thr: float = 0.5
    wi_recall_level: float = 0.8
    rules_version: int = METRICS_RULES_VERSION
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class_ap"] = {str(k): v for k, v in self.per_class_ap.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        d = dict(d)
        d["per_class_ap"] = {int(k): v for k, v in d["per_class_ap"].items()}
        return cls(**d)


def evaluate(frame: EvalFrame, registry: ClassRegistry, wi_recall_level: float = 0.8) -> MetricsReport:
    aps = per_class_ap(frame, registry.known)
    m_prev = mean_ap(aps, registry.previously_known)
    m_cur = mean_ap(aps, registry.current)
    m_both = mean_ap(aps, registry.known)
    prec, rec, uap = unknown_precision(frame)
    return MetricsReport(
        task=registry.current_task,
        per_class_ap=aps,
        map_prev=m_prev,
        map_current=m_cur,
        map_both=m_both,
        u_recall=u_recall(frame),
        a_ose=a_ose(frame),
        wi=wilderness_impact(frame, registry.known, wi_recall_level),
        f1i=f1i(m_prev, m_cur) if m_prev is not None and m_cur is not None else None,
        unknown_precision=prec,
        unknown_recall=rec,
        unknown_ap=uap,
        unknown_false_positives=unknown_false_positives(frame),
        known_as_unknown=known_as_unknown(frame),
        n_images=len(frame.image_ids),
        n_detections=sum(len(v) for v in frame.detections.values()),
        n_unknown_gt=sum(len(v) for v in frame.unknown_gts.values()),
        iou_thr=frame.iou_thr,
        wi_recall_level=wi_recall_level,
    )


# --- practical mode ------------------------------------------------------


@dataclass
class Harvest:
    records: list[ImageRecord]
    unknown_detections: int
    harvested: int


def harvest_unknowns(
    detections: Mapping[str, Sequence[Detection]],
    records: Sequence[ImageRecord],
    next_classes: Sequence[int],
    iou_thr: float = 0.5,
) -> Harvest:
    """Oracle-label unknown detections that overlap a next-task object.

    Each labelled region keeps the detection's box and takes the class of the
    best-overlapping unclaimed next-task object; images with nothing harvested
    are dropped.
    """
    allowed = set(next_classes)
    out, n_unknown, n_harvest = [], 0, 0
    for rec in records:
        dets = [d for d in detections.get(rec.image_id, ()) if d.label == UNKNOWN]
        n_unknown += len(dets)
        gts = [a for a in rec.annotations if a.class_id in allowed]
        dets = [dets[i] for i in _by_score(dets)]
        outcome, _ = match_detections(dets, gts, iou_thr, ignore_labels=True)
        anns = [Annotation(gts[o].class_id, d.box) for d, o in zip(dets, outcome) if o >= 0]
        if anns:
            out.append(rec.with_annotations(anns))
            n_harvest += len(anns)
    return Harvest(out, n_unknown, n_harvest)
