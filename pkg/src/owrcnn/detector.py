"""Compact two-stage detector with class-agnostic localisation-quality heads.

Backbone: four strided conv blocks feeding a two-level feature pyramid
(strides 8 and 16).  The RPN predicts, for one anchor point per feature cell, a
centerness logit and (l, t, r, b) distances in units of the level stride.  The
RoI network pools proposals with a bilinear RoIAlign and branches into the
classification, class-specific box, class-agnostic box and IoU heads.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .structures import BoundingBox, iou_matrix

STRIDES = (8, 16)
BOX_WEIGHTS = (10.0, 10.0, 5.0, 5.0)
_MAX_DLOG = math.log(1000.0 / 16)


# --- geometry ------------------------------------------------------------


@dataclass(frozen=True)
class LtrbOffsets:
    l: float
    t: float
    r: float
    b: float

    def __post_init__(self):
        if min(self.l, self.t, self.r, self.b) < 0:
            raise ValueError(f"negative edge distance in {self}")


def centerness_target(o: LtrbOffsets) -> float:
    lr, tb = max(o.l, o.r), max(o.t, o.b)
    if lr == 0 or tb == 0:
        raise ValueError(f"degenerate offsets {o}")
    return math.sqrt((min(o.l, o.r) / lr) * (min(o.t, o.b) / tb))


def centerness_array(ltrb: np.ndarray) -> np.ndarray:
    """Vectorised centerness for an (N, 4) array of non-degenerate offsets."""
    l, t, r, b = np.asarray(ltrb, dtype=np.float64).T
    return np.sqrt((np.minimum(l, r) / np.maximum(l, r)) * (np.minimum(t, b) / np.maximum(t, b)))


def encode_ltrb(center: tuple[float, float], gt: BoundingBox) -> LtrbOffsets:
    x, y = center
    if not gt.contains_point(x, y):
        raise ValueError(f"center {center} is not inside {gt}")
    return LtrbOffsets(x - gt.x1, y - gt.y1, gt.x2 - x, gt.y2 - y)


def decode_ltrb(center: tuple[float, float], o: LtrbOffsets) -> BoundingBox:
    x, y = center
    return BoundingBox(x - o.l, y - o.t, x + o.r, y + o.b)


def make_anchors(image_size: int, strides=STRIDES) -> np.ndarray:
    """Anchor points as rows of (cx, cy, stride), level-major then row-major."""
    out = []
    for s in strides:
        n = image_size // s
        ys, xs = np.mgrid[0:n, 0:n]
        pts = np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s, np.full(n * n, s)], axis=1)
        out.append(pts)
    return np.concatenate(out).astype(np.float64)


def encode_deltas(proposals, targets):
    """Faster R-CNN box deltas, scaled by ``BOX_WEIGHTS``.  Works on numpy or torch."""
    lib = torch if isinstance(proposals, torch.Tensor) else np
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    gw = targets[:, 2] - targets[:, 0]
    gh = targets[:, 3] - targets[:, 1]
    gx = targets[:, 0] + 0.5 * gw
    gy = targets[:, 1] + 0.5 * gh
    wx, wy, ww, wh = BOX_WEIGHTS
    parts = [wx * (gx - px) / pw, wy * (gy - py) / ph, ww * lib.log(gw / pw), wh * lib.log(gh / ph)]
    return torch.stack(parts, dim=1) if lib is torch else np.stack(parts, axis=1)


def decode_deltas(proposals, deltas):
    lib = torch if isinstance(proposals, torch.Tensor) else np
    pw = proposals[:, 2] - proposals[:, 0]
    ph = proposals[:, 3] - proposals[:, 1]
    px = proposals[:, 0] + 0.5 * pw
    py = proposals[:, 1] + 0.5 * ph
    wx, wy, ww, wh = BOX_WEIGHTS
    dx, dy = deltas[:, 0] / wx, deltas[:, 1] / wy
    dw = lib.clip(deltas[:, 2] / ww, -_MAX_DLOG, _MAX_DLOG)
    dh = lib.clip(deltas[:, 3] / wh, -_MAX_DLOG, _MAX_DLOG)
    cx, cy = px + dx * pw, py + dy * ph
    w, h = pw * lib.exp(dw), ph * lib.exp(dh)
    parts = [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h]
    return torch.stack(parts, dim=1) if lib is torch else np.stack(parts, axis=1)


def clip_boxes(boxes: np.ndarray, width: float, height: float, min_size: float = 1.0) -> np.ndarray:
    """Clip (N, 4) boxes to the image and widen anything thinner than ``min_size``."""
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0, width)
    b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0, height)
    for lo, hi, limit in ((0, 2, width), (1, 3, height)):
        thin = b[:, hi] - b[:, lo] < min_size
        mid = np.clip((b[thin, lo] + b[thin, hi]) / 2, min_size / 2, limit - min_size / 2)
        b[thin, lo], b[thin, hi] = mid - min_size / 2, mid + min_size / 2
    return b


# --- network -------------------------------------------------------------


def _block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.GroupNorm(8, cout),
        nn.ReLU(inplace=True),
    )


@dataclass
class RpnOutputs:
    ctr_logits: torch.Tensor  # (B, A)
    ltrb: torch.Tensor  # (B, A, 4), distances divided by the level stride


@dataclass
class RoIOutputs:
    cls_logits: torch.Tensor  # (R, K + 1), background last
    clsbox: torch.Tensor  # (R, K, 4) deltas
    agnbox: torch.Tensor  # (R, 4) deltas
    iou_logits: torch.Tensor  # (R,)

    def detach(self) -> "RoIOutputs":
        return RoIOutputs(*(t.detach() for t in (self.cls_logits, self.clsbox, self.agnbox, self.iou_logits)))


class Detector(nn.Module):
    def __init__(
        self,
        num_known: int,
        image_size: int = 128,
        width: int = 24,
        fpn_channels: int = 48,
        roi_hidden: int = 192,
        pool_size: int = 7,
        seed: int = 0,
    ):
        super().__init__()
        self.num_known = num_known
        self.image_size = image_size
        self.pool_size = pool_size
        self.arch = dict(image_size=image_size, width=width, fpn_channels=fpn_channels,
                         roi_hidden=roi_hidden, pool_size=pool_size, seed=seed)
        w, c = width, fpn_channels
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            self.stem = _block(3, w)
            self.c2 = _block(w, 2 * w)
            self.c3 = _block(2 * w, 4 * w)
            self.c4 = _block(4 * w, 4 * w)
            self.lat3 = nn.Conv2d(4 * w, c, 1)
            self.lat4 = nn.Conv2d(4 * w, c, 1)
            self.smooth3 = nn.Conv2d(c, c, 3, padding=1)
            self.smooth4 = nn.Conv2d(c, c, 3, padding=1)
            self.rpn_conv = nn.Conv2d(c, c, 3, padding=1)
            self.rpn_ctr = nn.Conv2d(c, 1, 1)
            self.rpn_box = nn.Conv2d(c, 4, 1)
            self.fc1 = nn.Linear(c * pool_size * pool_size, roi_hidden)
            self.fc2 = nn.Linear(roi_hidden, roi_hidden)
            self.agnbox = nn.Linear(roi_hidden, 4)
            self.iou = nn.Linear(roi_hidden, 1)
            nn.init.normal_(self.agnbox.weight, std=0.001)
            nn.init.zeros_(self.agnbox.bias)
            nn.init.normal_(self.iou.weight, std=0.01)
            nn.init.zeros_(self.iou.bias)
            nn.init.normal_(self.rpn_ctr.weight, std=0.01)
            nn.init.zeros_(self.rpn_ctr.bias)
            nn.init.normal_(self.rpn_box.weight, std=0.01)
            nn.init.constant_(self.rpn_box.bias, 1.0)
            # class heads get their own stream so the trunk does not depend on |K|
            torch.manual_seed(seed + 1_000_003)
            self.cls = nn.Linear(roi_hidden, num_known + 1)
            self.clsbox = nn.Linear(roi_hidden, 4 * num_known)
            nn.init.normal_(self.cls.weight, std=0.01)
            nn.init.zeros_(self.cls.bias)
            nn.init.normal_(self.clsbox.weight, std=0.001)
            nn.init.zeros_(self.clsbox.bias)
        self.register_buffer("anchors", torch.from_numpy(make_anchors(image_size)), persistent=False)

    # -- stage one --
    def features(self, images: torch.Tensor) -> list[torch.Tensor]:
        x = self.stem(images)
        x = self.c2(x)
        c3 = self.c3(x)
        c4 = self.c4(c3)
        p4 = self.lat4(c4)
        p3 = self.lat3(c3) + F.interpolate(p4, scale_factor=2, mode="nearest")
        return [self.smooth3(p3), self.smooth4(p4)]

    def rpn(self, feats: list[torch.Tensor]) -> RpnOutputs:
        ctrs, boxes = [], []
        for f in feats:
            h = F.relu(self.rpn_conv(f))
            ctrs.append(self.rpn_ctr(h).flatten(1))
            boxes.append(F.softplus(self.rpn_box(h)).flatten(2).transpose(1, 2))
        return RpnOutputs(torch.cat(ctrs, dim=1), torch.cat(boxes, dim=1))

    def forward(self, images: torch.Tensor) -> tuple[RpnOutputs, list[torch.Tensor]]:
        if images.dim() != 4 or images.shape[1:] != (3, self.image_size, self.image_size):
            raise ValueError(
                f"expected (B, 3, {self.image_size}, {self.image_size}) input, got {tuple(images.shape)}"
            )
        feats = self.features(images)
        return self.rpn(feats), feats

    # -- stage two --
    def roi_forward(self, feats: list[torch.Tensor], boxes: torch.Tensor, batch_idx: torch.Tensor) -> RoIOutputs:
        pooled = roi_align(feats, boxes, batch_idx, self.pool_size, self.image_size)
        h = F.relu(self.fc1(pooled.flatten(1)))
        h = F.relu(self.fc2(h))
        return RoIOutputs(
            cls_logits=self.cls(h),
            clsbox=self.clsbox(h).view(-1, self.num_known, 4),
            agnbox=self.agnbox(h),
            iou_logits=self.iou(h).squeeze(1),
        )

    def decode_rpn(self, rpn: RpnOutputs) -> torch.Tensor:
        """(B, A, 4) proposal boxes from the predicted distances."""
        a = self.anchors.to(rpn.ltrb.dtype)
        d = rpn.ltrb * a[:, 2:3]
        cx, cy = a[:, 0], a[:, 1]
        return torch.stack([cx - d[..., 0], cy - d[..., 1], cx + d[..., 2], cy + d[..., 3]], dim=-1)


def pyramid_level(boxes: torch.Tensor, threshold: float = 40.0) -> torch.Tensor:
    """Index of the pyramid level used to pool each box: small boxes use the finer map."""
    side = torch.sqrt((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]))
    return (side >= threshold).long()


def roi_align(
    feats: list[torch.Tensor],
    boxes: torch.Tensor,
    batch_idx: torch.Tensor,
    pool_size: int,
    image_size: int,
    sampling: int = 2,
) -> torch.Tensor:
    """Bilinear RoIAlign on the level matched to each box's scale.

    Each output bin averages ``sampling**2`` bilinear samples.
    """
    n = boxes.shape[0]
    c = feats[0].shape[1]
    out = feats[0].new_zeros((n, c, pool_size, pool_size))
    if n == 0:
        return out
    boxes = boxes.detach()
    levels = pyramid_level(boxes)
    g = pool_size * sampling
    steps = (torch.arange(g, dtype=boxes.dtype, device=boxes.device) + 0.5) / g
    for lvl, fmap in enumerate(feats):
        sel = torch.nonzero(levels == lvl).squeeze(1)
        if sel.numel() == 0:
            continue
        b = boxes[sel]
        xs = b[:, 0:1] + steps[None] * (b[:, 2:3] - b[:, 0:1])
        ys = b[:, 1:2] + steps[None] * (b[:, 3:4] - b[:, 1:2])
        # image coordinates -> [-1, 1] with align_corners=False
        gx = xs / image_size * 2 - 1
        gy = ys / image_size * 2 - 1
        grid = torch.stack(
            [gx[:, None, :].expand(-1, g, -1), gy[:, :, None].expand(-1, -1, g)], dim=-1
        )
        src = fmap[batch_idx[sel]]
        sampled = F.grid_sample(src, grid.to(fmap.dtype), mode="bilinear", padding_mode="border", align_corners=False)
        out[sel] = F.avg_pool2d(sampled, sampling)
    return out


def images_to_tensor(rasters, dtype=torch.float32) -> torch.Tensor:
    arr = np.stack([np.asarray(r) for r in rasters]).astype(np.float64) / 255.0
    return torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous().to(dtype)


# --- proposals -----------------------------------------------------------


@dataclass
class Proposals:
    boxes: np.ndarray  # (k, 4) clipped
    ctr_logits: np.ndarray  # (k,)
    anchor_idx: np.ndarray  # (k,)


def select_proposals(
    ctr_logits: np.ndarray, boxes: np.ndarray, k: int, image_size: int
) -> Proposals:
    """Top-``k`` anchors by centerness for one image, decoded and clipped."""
    if k < 1:
        raise ValueError("k must be at least 1")
    ctr_logits = np.asarray(ctr_logits, dtype=np.float64)
    order = np.argsort(-ctr_logits, kind="stable")[:k]
    clipped = clip_boxes(np.asarray(boxes)[order], image_size, image_size)
    return Proposals(clipped, ctr_logits[order], order)


# --- targets -------------------------------------------------------------


@dataclass
class RpnTargets:
    anchor_idx: np.ndarray  # (S,)
    centerness: np.ndarray  # (S,)
    ltrb: np.ndarray  # (S, 4) in stride units
    gt_idx: np.ndarray  # (S,)
    # only for classifier-style objectness (ablation): anchors outside every gt
    negative_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))


def assign_rpn_targets(
    anchors: np.ndarray, gts: np.ndarray, sample_size: int, rng: np.random.Generator
) -> RpnTargets:
    """Sample anchors whose centres fall strictly inside a ground-truth box.

    An anchor inside several boxes is assigned to the box whose centre is
    nearest (lowest index on exact ties).
    """
    anchors = np.asarray(anchors, dtype=np.float64)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    cx, cy = anchors[:, 0:1], anchors[:, 1:2]
    inside = (cx > gts[None, :, 0]) & (cx < gts[None, :, 2]) & (cy > gts[None, :, 1]) & (cy < gts[None, :, 3])
    gcx = (gts[:, 0] + gts[:, 2]) / 2
    gcy = (gts[:, 1] + gts[:, 3]) / 2
    dist = (cx - gcx[None]) ** 2 + (cy - gcy[None]) ** 2
    dist = np.where(inside, dist, np.inf)
    cand = np.flatnonzero(inside.any(axis=1))
    if cand.size > sample_size:
        cand = np.sort(rng.choice(cand, size=sample_size, replace=False))
    gi = np.argmin(dist[cand], axis=1) if cand.size else np.zeros(0, dtype=np.int64)
    g = gts[gi]
    a = anchors[cand]
    ltrb = np.stack([a[:, 0] - g[:, 0], a[:, 1] - g[:, 1], g[:, 2] - a[:, 0], g[:, 3] - a[:, 1]], axis=1)
    ctr = centerness_array(ltrb) if cand.size else np.zeros(0)
    return RpnTargets(cand.astype(np.int64), ctr, ltrb / a[:, 2:3], gi.astype(np.int64))


def sample_negative_anchors(anchors, gts, count, rng) -> np.ndarray:
    anchors = np.asarray(anchors)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    cx, cy = anchors[:, 0:1], anchors[:, 1:2]
    inside = (cx > gts[None, :, 0]) & (cx < gts[None, :, 2]) & (cy > gts[None, :, 1]) & (cy < gts[None, :, 3])
    neg = np.flatnonzero(~inside.any(axis=1))
    if neg.size > count:
        neg = np.sort(rng.choice(neg, size=count, replace=False))
    return neg.astype(np.int64)


@dataclass
class RoiTargets:
    proposals: np.ndarray  # (R, 4)
    batch_idx: np.ndarray  # (R,)
    ctr_logits: np.ndarray  # (R,) RPN centerness logit of the proposal's anchor
    labels: np.ndarray  # (R,) dense class index, K for background, -1 ignored
    fg: np.ndarray  # (R,) bool
    deltas: np.ndarray  # (R, 4) towards the matched gt
    matched_gt: np.ndarray  # (R, 4)
    max_iou: np.ndarray  # (R,)
    iou_supervised: np.ndarray  # (R,) bool
    iou_target: np.ndarray | None = None  # filled from the agnostic head output


def assign_roi_targets(
    proposals: np.ndarray,
    ctr_logits: np.ndarray,
    gts: np.ndarray,
    gt_labels: np.ndarray,
    num_known: int,
    batch_size: int,
    fg_fraction: float,
    rng: np.random.Generator,
    fg_iou: float = 0.5,
    bg_iou: float = 0.3,
) -> RoiTargets:
    """Two-threshold assignment and fg/bg sampling for one image."""
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    ious = iou_matrix(proposals, gts)
    max_iou = ious.max(axis=1) if gts.size else np.zeros(len(proposals))
    arg = ious.argmax(axis=1) if gts.size else np.zeros(len(proposals), dtype=np.int64)
    fg_idx = np.flatnonzero(max_iou >= fg_iou)
    bg_idx = np.flatnonzero(max_iou < bg_iou)
    n_fg = min(fg_idx.size, int(round(batch_size * fg_fraction)))
    fg_idx = np.sort(rng.choice(fg_idx, size=n_fg, replace=False)) if n_fg else fg_idx[:0]
    n_bg = min(bg_idx.size, batch_size - n_fg)
    bg_idx = np.sort(rng.choice(bg_idx, size=n_bg, replace=False)) if n_bg else bg_idx[:0]
    # the IoU head also sees partially overlapping regions from the ignore band
    mid_idx = np.flatnonzero((max_iou >= bg_iou) & (max_iou < fg_iou))
    n_mid = min(mid_idx.size, max(1, n_fg // 2)) if n_fg else 0
    mid_idx = np.sort(rng.choice(mid_idx, size=n_mid, replace=False)) if n_mid else mid_idx[:0]
    keep = np.concatenate([fg_idx, mid_idx, bg_idx])

    props = proposals[keep]
    labels = np.full(keep.size, num_known, dtype=np.int64)
    labels[: fg_idx.size] = np.asarray(gt_labels, dtype=np.int64)[arg[fg_idx]]
    labels[fg_idx.size : fg_idx.size + mid_idx.size] = -1
    fg = np.zeros(keep.size, dtype=bool)
    fg[: fg_idx.size] = True
    matched = gts[arg[keep]] if gts.size else np.zeros((keep.size, 4))
    deltas = encode_deltas(props, matched) if gts.size else np.zeros((keep.size, 4))
    deltas = np.where(fg[:, None], deltas, 0.0)
    return RoiTargets(
        proposals=props,
        batch_idx=np.zeros(keep.size, dtype=np.int64),
        ctr_logits=np.asarray(ctr_logits, dtype=np.float64)[keep],
        labels=labels,
        fg=fg,
        deltas=deltas,
        matched_gt=matched,
        max_iou=max_iou[keep],
        iou_supervised=max_iou[keep] > 0,
    )


def concat_roi_targets(parts: list[RoiTargets]) -> RoiTargets:
    out = {}
    for name in RoiTargets.__dataclass_fields__:
        vals = [getattr(p, name) for p in parts]
        if name == "batch_idx":
            vals = [np.full(len(p.labels), i, dtype=np.int64) for i, p in enumerate(parts)]
        if vals[0] is None:
            out[name] = None
            continue
        out[name] = np.concatenate(vals)
    return RoiTargets(**out)


def realized_iou(proposals: np.ndarray, agn_deltas: np.ndarray, matched_gt: np.ndarray) -> np.ndarray:
    """IoU between each agnostic-head box and its matched ground truth."""
    boxes = decode_deltas(np.asarray(proposals, dtype=np.float64), np.asarray(agn_deltas, dtype=np.float64))
    a, b = boxes, np.asarray(matched_gt, dtype=np.float64)
    iw = np.clip(np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1]), 0, None)
    inter = iw * ih
    union = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1]) + (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1]) - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


# --- exclusion mask ------------------------------------------------------


def softmax_np(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def build_exclusion_mask(
    cls_logits: np.ndarray,
    s_obj: np.ndarray,
    proposals: np.ndarray,
    gts: np.ndarray,
    prior_idx,
    theta_cls: float,
    theta_obj: float,
) -> np.ndarray:
    """Regions whose classification loss is dropped as likely unlabelled prior-class objects."""
    n = len(cls_logits)
    prior_idx = list(prior_idx)
    if not prior_idx or n == 0:
        return np.zeros(n, dtype=bool)
    probs = softmax_np(cls_logits)
    confident = probs[:, prior_idx].max(axis=1) > theta_cls
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    overlap = iou_matrix(proposals, gts).max(axis=1) > 0 if gts.size else np.zeros(n, dtype=bool)
    return confident & (np.asarray(s_obj) > theta_obj) & ~overlap


# --- losses --------------------------------------------------------------


@dataclass
class LossBreakdown:
    ctr: torch.Tensor
    box: torch.Tensor
    cls: torch.Tensor
    clsbox: torch.Tensor
    agnbox: torch.Tensor
    iou: torch.Tensor
    cls_weight: float = 3.0

    @property
    def total(self) -> torch.Tensor:
        return self.ctr + self.box + self.cls_weight * self.cls + self.clsbox + self.agnbox + self.iou

    def as_dict(self) -> dict[str, float]:
        d = {k: float(getattr(self, k).detach()) for k in ("ctr", "box", "cls", "clsbox", "agnbox", "iou")}
        d["total"] = float(self.total.detach())
        return d


def _mean_or_zero(x: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    return x.mean() if x.numel() else ref.new_zeros(())


def compute_losses(
    rpn_targets: list[RpnTargets],
    roi_targets: RoiTargets,
    rpn: RpnOutputs,
    roi: RoIOutputs,
    mask: np.ndarray,
    rpn_mode: str = "centerness",
    agnostic_heads: bool = True,
) -> LossBreakdown:
    """Six-term detector loss.

    ``rpn_targets`` holds one entry per image of the batch.  ``mask`` marks
    regions excluded from the classification term only.  With
    ``rpn_mode="classifier"`` the first-stage head is trained as a binary
    objectness classifier (positives vs anchors outside all boxes) and, with
    ``agnostic_heads=False``, the agnostic box and IoU terms are dropped.
    """
    ref = rpn.ctr_logits
    dt = ref.dtype
    ctr_terms, box_terms = [], []
    for b, t in enumerate(rpn_targets):
        idx = torch.as_tensor(t.anchor_idx, dtype=torch.long)
        pred_ctr = rpn.ctr_logits[b, idx]
        if rpn_mode == "centerness":
            ctr_terms.append((torch.sigmoid(pred_ctr) - torch.as_tensor(t.centerness, dtype=dt)).abs())
        else:
            neg = torch.as_tensor(t.negative_idx, dtype=torch.long)
            logits = torch.cat([pred_ctr, rpn.ctr_logits[b, neg]])
            labels = torch.cat([torch.ones(idx.numel(), dtype=dt), torch.zeros(neg.numel(), dtype=dt)])
            ctr_terms.append(F.binary_cross_entropy_with_logits(logits, labels, reduction="none"))
        box_terms.append((rpn.ltrb[b, idx] - torch.as_tensor(t.ltrb, dtype=dt)).abs().flatten())
    l_ctr = _mean_or_zero(torch.cat(ctr_terms), ref)
    l_box = _mean_or_zero(torch.cat(box_terms), ref)

    labels = torch.as_tensor(roi_targets.labels, dtype=torch.long)
    keep = (labels >= 0) & ~torch.as_tensor(np.asarray(mask, dtype=bool))
    if keep.any():
        l_cls = F.cross_entropy(roi.cls_logits[keep], labels[keep])
    else:
        l_cls = ref.new_zeros(())

    fg = torch.as_tensor(roi_targets.fg)
    deltas = torch.as_tensor(roi_targets.deltas, dtype=dt)
    fg_idx = torch.nonzero(fg).squeeze(1)
    if fg_idx.numel():
        chosen = roi.clsbox[fg_idx, labels[fg_idx]]
        l_clsbox = (chosen - deltas[fg_idx]).abs().mean()
    else:
        l_clsbox = ref.new_zeros(())

    if agnostic_heads:
        l_agn = _mean_or_zero((roi.agnbox[fg_idx] - deltas[fg_idx]).abs(), ref)
        sup = torch.nonzero(torch.as_tensor(roi_targets.iou_supervised)).squeeze(1)
        if sup.numel():
            target = torch.as_tensor(roi_targets.iou_target, dtype=dt)[sup]
            l_iou = (torch.sigmoid(roi.iou_logits[sup]) - target).abs().mean()
        else:
            l_iou = ref.new_zeros(())
    else:
        l_agn = ref.new_zeros(())
        l_iou = ref.new_zeros(())
    return LossBreakdown(l_ctr, l_box, l_cls, l_clsbox, l_agn, l_iou)
