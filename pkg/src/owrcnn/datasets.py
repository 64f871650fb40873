"""Synthetic shape scenes and COCO-style annotation I/O.

Object classes are (shape, colour) pairs drawn on a noisy canvas together with
unannotated grey clutter.  Every scene is a pure function of ``(seed, index)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .structures import Annotation, BoundingBox, ImageRecord, TaskSchedule

log = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "star", "bar", "ellipse", "diamond", "hexagon")

COLORS = {
    "red": (220, 40, 40),
    "green": (40, 190, 60),
    "blue": (50, 80, 230),
    "yellow": (230, 210, 40),
    "magenta": (210, 50, 200),
    "cyan": (40, 200, 210),
    "orange": (240, 130, 30),
    "white": (245, 245, 245),
}
PALETTE = tuple(COLORS)

# colour name meaning "draw a palette colour per instance"
ANY_COLOR = "any"

# One class per shape, drawn in any palette colour, so that class identity is
# carried by the outline alone.  The first five form the two-task benchmark:
# three known shapes and two held-out ones that look nothing like them.
DEFAULT_CLASSES = tuple(
    (shape, ANY_COLOR)
    for shape in ("circle", "square", "triangle", "star", "cross", "ring", "bar", "ellipse", "diamond", "hexagon")
)


class SceneError(ValueError):
    """Raised when a scene cannot be generated as configured."""


@dataclass
class SceneConfig:
    image_size: int = 128
    shape_classes: tuple[tuple[str, str], ...] = DEFAULT_CLASSES
    objects_per_image: tuple[int, int] = (1, 3)
    scale_range: tuple[float, float] = (0.15, 0.35)
    clutter_level: int = 2
    background_noise: float = 8.0
    color_jitter: int = 20
    seed: int = 0
    # restrict sampling to these class ids (1-based); None means all classes
    class_ids: tuple[int, ...] | None = None
    # relative sampling weight of each active class; None samples uniformly
    class_weights: tuple[float, ...] | None = None
    max_placement_tries: int = 200

    def __post_init__(self):
        self.shape_classes = tuple(tuple(c) for c in self.shape_classes)
        self.objects_per_image = tuple(self.objects_per_image)
        self.scale_range = tuple(self.scale_range)
        if self.class_ids is not None:
            self.class_ids = tuple(self.class_ids)
        for shape, color in self.shape_classes:
            if shape not in SHAPES or (color not in COLORS and color != ANY_COLOR):
                raise ValueError(f"unsupported class definition ({shape}, {color})")
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
            if len(self.class_weights) != len(self.active_class_ids):
                raise ValueError("class_weights needs one entry per active class")
            if min(self.class_weights) < 0 or sum(self.class_weights) <= 0:
                raise ValueError("class_weights must be non-negative with a positive sum")
        lo, hi = self.objects_per_image
        if not 0 <= lo <= hi:
            raise ValueError("objects_per_image must be an ordered non-negative range")
        if not 0 < self.scale_range[0] <= self.scale_range[1] < 1:
            raise ValueError("scale_range must lie in (0, 1)")

    @property
    def num_classes(self) -> int:
        return len(self.shape_classes)

    @property
    def active_class_ids(self) -> tuple[int, ...]:
        if self.class_ids is not None:
            return self.class_ids
        return tuple(range(1, self.num_classes + 1))

    def categories(self) -> list[dict]:
        return [
            {"id": i, "name": shape if color == ANY_COLOR else f"{color}_{shape}"}
            for i, (shape, color) in enumerate(self.shape_classes, start=1)
        ]

    def check_schedule(self, schedule: TaskSchedule) -> None:
        missing = set(schedule.universe) - set(range(1, self.num_classes + 1))
        if missing:
            raise ValueError(
                f"schedule needs classes {sorted(missing)} but only {self.num_classes} are defined"
            )


def shape_mask(shape: str, w: int, h: int) -> np.ndarray:
    """Boolean mask of ``shape`` filling a ``h`` x ``w`` patch."""
    ys, xs = np.mgrid[0:h, 0:w]
    # normalised pixel-centre coordinates in [-1, 1]
    u = (xs + 0.5) / w * 2 - 1
    v = (ys + 0.5) / h * 2 - 1
    r = np.sqrt(u**2 + v**2)
    if shape in ("circle", "ellipse"):
        m = r <= 1.0
    elif shape == "square":
        m = np.ones((h, w), dtype=bool)
    elif shape == "ring":
        m = (r <= 1.0) & (r >= 0.55)
    elif shape == "triangle":
        # apex at top centre, base along the bottom edge
        m = np.abs(u) <= (v + 1) / 2
    elif shape == "cross":
        m = (np.abs(u) <= 0.3) | (np.abs(v) <= 0.3)
    elif shape == "bar":
        m = np.abs(v) <= 1.0
    elif shape == "diamond":
        m = np.abs(u) + np.abs(v) <= 1.0
    elif shape == "hexagon":
        # flat top and bottom, pointed left and right
        m = np.abs(u) <= 1.0 - 0.5 * np.abs(v)
    elif shape == "star":
        theta = np.arctan2(v, u)
        m = r <= 0.5 + 0.5 * np.abs(np.cos(2.5 * theta))
    else:
        raise ValueError(f"unknown shape {shape}")
    return m


def _shape_size(shape: str, side: float, rng: np.random.Generator) -> tuple[int, int]:
    if shape == "bar":
        return max(4, int(round(side))), max(3, int(round(side * 0.35)))
    if shape == "ellipse":
        return max(4, int(round(side))), max(3, int(round(side * 0.6)))
    aspect = rng.uniform(0.9, 1.1)
    return max(4, int(round(side))), max(4, int(round(side * aspect)))


def _tight(mask: np.ndarray) -> tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]) + 1, int(rows[-1]) + 1


def _overlaps(box, boxes, gap: int = 2) -> bool:
    x1, y1, x2, y2 = box
    for a1, b1, a2, b2 in boxes:
        if x1 < a2 + gap and a1 < x2 + gap and y1 < b2 + gap and b1 < y2 + gap:
            return True
    return False


def generate_scene(cfg: SceneConfig, index: int) -> ImageRecord:
    rng = np.random.default_rng([cfg.seed, index])
    size = cfg.image_size
    base = rng.uniform(30, 90, size=3)
    canvas = np.broadcast_to(base, (size, size, 3)).astype(np.float64).copy()
    if cfg.background_noise > 0:
        canvas += rng.normal(0, cfg.background_noise, size=canvas.shape)

    # clutter: grey textured blobs, never annotated and never a class colour
    for _ in range(cfg.clutter_level):
        cw, ch = rng.integers(size // 10, size // 4, size=2)
        cx, cy = rng.integers(0, size - cw), rng.integers(0, size - ch)
        blob = shape_mask("ellipse", int(cw), int(ch)) & (rng.random((int(ch), int(cw))) < 0.7)
        level = rng.uniform(90, 170)
        tex = level + rng.normal(0, 25, size=(int(ch), int(cw)))
        region = canvas[cy : cy + ch, cx : cx + cw]
        region[blob] = tex[blob][:, None]

    lo, hi = cfg.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    classes = cfg.active_class_ids
    if cfg.class_weights is not None:
        probs = np.asarray(cfg.class_weights) / sum(cfg.class_weights)
    placed: list[tuple[int, int, int, int]] = []
    annotations = []
    for _ in range(n_obj):
        if cfg.class_weights is None:
            cid = int(classes[rng.integers(len(classes))])
        else:
            cid = int(classes[rng.choice(len(classes), p=probs)])
        shape, color = cfg.shape_classes[cid - 1]
        for _ in range(cfg.max_placement_tries):
            side = rng.uniform(*cfg.scale_range) * size
            w, h = _shape_size(shape, side, rng)
            if rng.random() < 0.5 and shape in ("bar", "ellipse"):
                w, h = h, w
            if w >= size or h >= size:
                continue
            x0 = int(rng.integers(0, size - w + 1))
            y0 = int(rng.integers(0, size - h + 1))
            mask = shape_mask(shape, w, h)
            tx1, ty1, tx2, ty2 = _tight(mask)
            box = (x0 + tx1, y0 + ty1, x0 + tx2, y0 + ty2)
            if not _overlaps(box, placed):
                break
        else:
            raise SceneError(
                f"scene {index}: could not place {n_obj} non-overlapping objects "
                f"after {cfg.max_placement_tries} tries each"
            )
        if color == ANY_COLOR:
            color = PALETTE[int(rng.integers(len(PALETTE)))]
        rgb = np.asarray(COLORS[color], dtype=np.float64)
        rgb = rgb + rng.integers(-cfg.color_jitter, cfg.color_jitter + 1, size=3)
        patch = canvas[y0 : y0 + h, x0 : x0 + w]
        patch[mask] = rgb
        placed.append(box)
        annotations.append(Annotation(cid, BoundingBox(*map(float, box))))

    raster = np.clip(np.round(canvas), 0, 255).astype(np.uint8)
    return ImageRecord(
        image_id=f"s{cfg.seed}_{index:06d}",
        width=size,
        height=size,
        annotations=tuple(annotations),
        raster=raster,
        file_name=f"s{cfg.seed}_{index:06d}.png",
    )


def generate_dataset(cfg: SceneConfig, n: int, start: int = 0) -> list[ImageRecord]:
    if n < 1:
        raise ValueError("dataset size must be at least 1")
    return [generate_scene(cfg, start + i) for i in range(n)]


# --- COCO-style I/O -------------------------------------------------------


def to_coco(records: Sequence[ImageRecord], categories: Sequence[dict]) -> dict:
    images, annotations = [], []
    ann_id = 1
    for rec in records:
        images.append(
            {
                "id": rec.image_id,
                "width": rec.width,
                "height": rec.height,
                "file_name": rec.file_name or f"{rec.image_id}.png",
            }
        )
        for a in rec.annotations:
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": rec.image_id,
                    "category_id": a.class_id,
                    "bbox": list(a.box.to_xywh()),
                }
            )
            ann_id += 1
    return {"images": images, "annotations": annotations, "categories": list(categories)}


def write_coco(records: Sequence[ImageRecord], categories: Sequence[dict], path) -> None:
    Path(path).write_text(json.dumps(to_coco(records, categories), indent=1, sort_keys=True))


def parse_coco(doc: dict, allowed: set[int] | None = None) -> list[ImageRecord]:
    for key in ("images", "annotations", "categories"):
        if key not in doc or not isinstance(doc[key], list):
            raise ValueError(f"malformed annotation file: missing list '{key}'")
    cat_ids = {int(c["id"]) for c in doc["categories"]}
    by_image: dict = {}
    for a in doc["annotations"]:
        try:
            cid, img, bbox = int(a["category_id"]), a["image_id"], a["bbox"]
        except (KeyError, TypeError, ValueError) as err:
            raise ValueError(f"malformed annotation entry {a!r}") from err
        if cid not in cat_ids or (allowed is not None and cid not in allowed):
            raise ValueError(f"unknown category id {cid} in annotation {a.get('id')}")
        if len(bbox) != 4:
            raise ValueError(f"bbox must be [x, y, w, h], got {bbox!r}")
        by_image.setdefault(img, []).append(Annotation(cid, BoundingBox.from_xywh(*bbox)))
    records = []
    for im in doc["images"]:
        if "width" not in im or "height" not in im:
            raise ValueError(f"image {im.get('id')!r} is missing its dimensions")
        records.append(
            ImageRecord(
                image_id=str(im["id"]),
                width=int(im["width"]),
                height=int(im["height"]),
                annotations=tuple(by_image.get(im["id"], ())),
                file_name=im.get("file_name"),
            )
        )
    return records


def ingest_coco(annotation_file, image_root=None, schedule: TaskSchedule | None = None) -> list[ImageRecord]:
    """Load a COCO-style file; rasters come from a PNG directory or an ``.npz`` archive."""
    try:
        doc = json.loads(Path(annotation_file).read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"malformed annotation file {annotation_file}: {err}") from err
    allowed = set(schedule.universe) if schedule is not None else None
    records = parse_coco(doc, allowed)
    if image_root is not None:
        records = attach_rasters(records, image_root)
    return records


def save_rasters(records: Sequence[ImageRecord], target) -> None:
    """Store rasters as ``<dir>/<file_name>`` PNGs, or in one archive when ``target`` ends in ``.npz``."""
    target = Path(target)
    if target.suffix == ".npz":
        np.savez_compressed(target, **{r.image_id: r.raster for r in records})
        return
    from PIL import Image

    target.mkdir(parents=True, exist_ok=True)
    for r in records:
        Image.fromarray(r.raster).save(target / (r.file_name or f"{r.image_id}.png"))


def attach_rasters(records: Sequence[ImageRecord], source) -> list[ImageRecord]:
    from dataclasses import replace

    source = Path(source)
    out = []
    if source.suffix == ".npz":
        with np.load(source) as arch:
            for r in records:
                out.append(replace(r, raster=arch[r.image_id]))
        return out
    from PIL import Image

    for r in records:
        path = source / (r.file_name or f"{r.image_id}.png")
        out.append(replace(r, raster=np.asarray(Image.open(path).convert("RGB"))))
    return out


def write_schedule(schedule: TaskSchedule, path) -> None:
    Path(path).write_text(json.dumps([list(t) for t in schedule.tasks]))


def read_schedule(path) -> TaskSchedule:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict):
        doc = doc["tasks"]
    return TaskSchedule(tuple(tuple(t) for t in doc))
