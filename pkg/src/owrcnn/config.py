"""Run configuration: one JSON document mirroring ``RunConfig`` plus its content hash."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .continual import ContinualConfig
from .datasets import SceneConfig, read_schedule
from .inference import DetectOptions, Thresholds
from .structures import TaskSchedule
from .training import TrainConfig

# three known shapes, then the two held-out ones
DEFAULT_SCHEDULE = ((1, 2, 3), (4, 5))


@dataclass
class Toggles:
    """Component switches; the default is the full detector."""

    fine_tune_only: bool = True
    class_agnostic_detection: bool = True
    gmm_correction: bool = True
    prior_class_handling: bool = True


@dataclass
class EvalConfig:
    iou_thr: float = 0.5
    wi_recall: float = 0.8
    score_floor: float = 0.05
    nms_iou: float = 0.5
    max_detections: int = 100
    practical_iou: float = 0.5


@dataclass
class RunConfig:
    data_dir: str = "data"
    run_dir: str = "runs/default"
    schedule: tuple[tuple[int, ...], ...] = DEFAULT_SCHEDULE
    # a schedule file (as written by write_schedule) takes precedence over ``schedule``
    schedule_file: str | None = None
    scene: SceneConfig = field(default_factory=lambda: SceneConfig(objects_per_image=(2, 4)))
    images_per_task: int = 200
    test_images: int = 150
    # sampling weight of other tasks' classes inside a task's image pool
    foreign_weight: float = 0.25
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=24))
    thresholds: Thresholds = field(default_factory=Thresholds)
    eval: EvalConfig = field(default_factory=EvalConfig)
    exemplar_n: int = 15
    exemplar_max_fraction: float = 0.2
    finetune_epochs: int | None = 150
    gmm_components: int = 1
    gmm_min_samples: int = 10
    toggles: Toggles = field(default_factory=Toggles)
    seed: int = 0

    def __post_init__(self):
        self.schedule = tuple(tuple(int(c) for c in t) for t in self.schedule)
        if self.images_per_task < 1 or self.test_images < 1:
            raise ValueError("image counts must be positive")
        if self.foreign_weight < 0:
            raise ValueError("foreign_weight must be non-negative")

    def task_schedule(self) -> TaskSchedule:
        if self.schedule_file:
            return read_schedule(self.schedule_file)
        return TaskSchedule(self.schedule)

    def train_config(self) -> TrainConfig:
        agn = self.toggles.class_agnostic_detection
        return replace(
            self.train,
            seed=self.seed,
            theta_cls=self.thresholds.theta_cls,
            theta_obj=self.thresholds.theta_obj,
            rpn_mode="centerness" if agn else "classifier",
            agnostic_heads=agn,
            prior_class_handling=self.toggles.prior_class_handling,
        )

    def continual_config(self) -> ContinualConfig:
        return ContinualConfig(
            train=self.train_config(),
            finetune_epochs=self.finetune_epochs,
            exemplar_n=self.exemplar_n,
            exemplar_max_fraction=self.exemplar_max_fraction,
            gmm_components=self.gmm_components,
            gmm_min_samples=self.gmm_min_samples,
            fine_tune_only=self.toggles.fine_tune_only,
        )

    def detect_options(self) -> DetectOptions:
        agn = self.toggles.class_agnostic_detection
        return DetectOptions(
            k_proposals=self.train.proposals_test,
            score_floor=self.eval.score_floor,
            nms_iou=self.eval.nms_iou,
            max_detections=self.eval.max_detections,
            unknown_branch=agn,
            gmm_correction=self.toggles.gmm_correction,
            agnostic_heads=agn,
        )

    def scene_for(self, pool: str | int) -> SceneConfig:
        """Scene settings of a task's training pool (``pool`` = task index) or of the test set (``"test"``)."""
        universe = self.task_schedule().universe
        if pool == "test":
            return replace(self.scene, seed=_derived_seed(self.seed, 0), class_ids=universe, class_weights=None)
        own = set(self.task_schedule().classes(int(pool)))
        weights = tuple(1.0 if c in own else self.foreign_weight for c in universe)
        return replace(self.scene, seed=_derived_seed(self.seed, int(pool)), class_ids=universe, class_weights=weights)

    # --- serialisation ----------------------------------------------------

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        nested = {
            "scene": SceneConfig,
            "train": TrainConfig,
            "thresholds": Thresholds,
            "eval": EvalConfig,
            "toggles": Toggles,
        }
        kwargs = {}
        for key, value in doc.items():
            if key in nested:
                sub = nested[key]
                bad = set(value) - {f.name for f in fields(sub)}
                if bad:
                    raise ValueError(f"unknown keys in {key}: {sorted(bad)}")
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def _derived_seed(seed: int, pool: int) -> int:
    # pool 0 is the test set, pools 1.. are task training sets
    return seed * 1000 + pool


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x
