"""Open-world two-stage object detection on synthetic shape worlds."""

__version__ = "0.1.0"

from .structures import UNKNOWN, Annotation, BoundingBox, ClassRegistry, Detection, ImageRecord, TaskSchedule

__all__ = [
    "UNKNOWN",
    "Annotation",
    "BoundingBox",
    "ClassRegistry",
    "Detection",
    "ImageRecord",
    "TaskSchedule",
]
