"""Boxes, annotations, task schedules and the known/unknown class bookkeeping."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

# Reserved label for unknown detections; outside the class id space.
UNKNOWN = -1


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"non-finite box coordinates {coords}")
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box {coords}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BoundingBox":
        return cls(float(x), float(y), float(x) + float(w), float(y) + float(h))

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2 - self.x1, self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)

    def contains_point(self, x: float, y: float) -> bool:
        return self.x1 < x < self.x2 and self.y1 < y < self.y2


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between corner-form arrays of shape (N, 4) and (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


@dataclass(frozen=True)
class Annotation:
    class_id: int
    box: BoundingBox


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    annotations: tuple[Annotation, ...] = ()
    raster: np.ndarray | None = field(default=None, compare=False, repr=False)
    file_name: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "annotations", tuple(self.annotations))
        for ann in self.annotations:
            b = ann.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise ValueError(f"{self.image_id}: box {b} outside {self.width}x{self.height} image")

    def with_annotations(self, annotations: Iterable[Annotation]) -> "ImageRecord":
        return replace(self, annotations=tuple(annotations))

    @property
    def class_ids(self) -> set[int]:
        return {a.class_id for a in self.annotations}


@dataclass(frozen=True)
class TaskSchedule:
    tasks: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        tasks = tuple(tuple(int(c) for c in t) for t in self.tasks)
        object.__setattr__(self, "tasks", tasks)
        seen: set[int] = set()
        for i, t in enumerate(tasks, start=1):
            if not t:
                raise ValueError(f"task {i} has no classes")
            if len(set(t)) != len(t) or seen & set(t):
                raise ValueError(f"task {i} repeats a class already scheduled")
            seen |= set(t)

    def __len__(self) -> int:
        return len(self.tasks)

    @property
    def universe(self) -> tuple[int, ...]:
        """All scheduled classes in schedule order; the position is the dense index."""
        return tuple(c for t in self.tasks for c in t)

    def classes(self, t: int) -> tuple[int, ...]:
        self._check(t)
        return self.tasks[t - 1]

    def _check(self, t: int) -> None:
        if not 1 <= t <= len(self.tasks):
            raise IndexError(f"task index {t} outside 1..{len(self.tasks)}")


@dataclass(frozen=True)
class ClassRegistry:
    schedule: TaskSchedule
    current_task: int = 1

    def __post_init__(self):
        self.schedule._check(self.current_task)

    @property
    def known(self) -> tuple[int, ...]:
        return tuple(c for t in self.schedule.tasks[: self.current_task] for c in t)

    @property
    def unknown(self) -> tuple[int, ...]:
        return tuple(c for t in self.schedule.tasks[self.current_task :] for c in t)

    @property
    def previously_known(self) -> tuple[int, ...]:
        return tuple(c for t in self.schedule.tasks[: self.current_task - 1] for c in t)

    @property
    def current(self) -> tuple[int, ...]:
        return self.schedule.tasks[self.current_task - 1]

    def index_of(self, class_id: int) -> int:
        """Dense index of a known class in score vectors."""
        return self.known.index(class_id)

    def at(self, t: int) -> "ClassRegistry":
        return ClassRegistry(self.schedule, t)


def known_and_unknown(registry: ClassRegistry) -> tuple[frozenset[int], frozenset[int]]:
    return frozenset(registry.known), frozenset(registry.unknown)


def make_task_view(
    dataset: Sequence[ImageRecord], registry: ClassRegistry, t: int
) -> list[ImageRecord]:
    allowed = set(registry.schedule.classes(t))
    view = []
    for rec in dataset:
        kept = [a for a in rec.annotations if a.class_id in allowed]
        if kept:
            view.append(rec.with_annotations(kept))
    return view


def merge_views(*views: Sequence[ImageRecord]) -> list[ImageRecord]:
    """Union several label views, merging annotations of images that repeat."""
    merged: dict[str, ImageRecord] = {}
    for view in views:
        for rec in view:
            if rec.image_id not in merged:
                merged[rec.image_id] = rec
                continue
            prev = merged[rec.image_id]
            anns = list(prev.annotations)
            anns += [a for a in rec.annotations if a not in anns]
            merged[rec.image_id] = prev.with_annotations(anns)
    return list(merged.values())


PROVENANCES = ("classifier", "objectness")


@dataclass(frozen=True)
class Detection:
    label: int
    score: float
    box: BoundingBox
    # "classifier" when the score is a softmax probability, "objectness" when it is s_obj
    provenance: str = "classifier"

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")
