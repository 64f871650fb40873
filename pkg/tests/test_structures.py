import numpy as np
import pytest
from hypothesis import given, strategies as st

from owrcnn.structures import (
    UNKNOWN,
    Annotation,
    BoundingBox,
    ClassRegistry,
    Detection,
    ImageRecord,
    TaskSchedule,
    iou,
    iou_matrix,
    make_task_view,
    merge_views,
)

from conftest import boxes
from oracles import box_iou


def test_box_rejects_degenerate_and_nonfinite():
    with pytest.raises(ValueError):
        BoundingBox(5, 5, 5, 9)
    with pytest.raises(ValueError):
        BoundingBox(0, 0, float("nan"), 3)
    with pytest.raises(ValueError):
        BoundingBox(4, 0, 2, 3)


def test_xywh_round_trip():
    b = BoundingBox.from_xywh(3, 4, 10, 6)
    assert b == BoundingBox(3, 4, 13, 10)
    assert b.to_xywh() == (3, 4, 10, 6)
    assert b.area == 60
    assert b.center == (8, 7)


def test_contains_point_is_strict():
    b = BoundingBox(0, 0, 10, 10)
    assert b.contains_point(5, 5)
    assert not b.contains_point(0, 5)
    assert not b.contains_point(10, 10)


def test_iou_known_values():
    a = BoundingBox(0, 0, 10, 10)
    assert iou(a, a) == 1.0
    assert iou(a, BoundingBox(10, 0, 20, 10)) == 0.0
    assert iou(a, BoundingBox(5, 0, 15, 10)) == pytest.approx(50 / 150)


@given(st.lists(boxes(), min_size=1, max_size=6), st.lists(boxes(), min_size=1, max_size=6))
def test_iou_matrix_matches_pairwise_oracle(xs, ys):
    m = iou_matrix(np.array([b.as_array() for b in xs]), np.array([b.as_array() for b in ys]))
    for i, a in enumerate(xs):
        for j, b in enumerate(ys):
            assert m[i, j] == pytest.approx(box_iou(a.as_array(), b.as_array()), abs=1e-12)
            assert 0.0 <= m[i, j] <= 1.0


@given(boxes(), boxes())
def test_iou_symmetric(a, b):
    assert iou(a, b) == pytest.approx(iou(b, a))


def test_image_record_rejects_box_outside():
    with pytest.raises(ValueError):
        ImageRecord("x", 10, 10, (Annotation(1, BoundingBox(0, 0, 11, 5)),))


def test_schedule_validation():
    with pytest.raises(ValueError):
        TaskSchedule(((1, 2), (2, 3)))
    with pytest.raises(ValueError):
        TaskSchedule(((1,), ()))
    s = TaskSchedule(((3, 1), (2,)))
    assert s.universe == (3, 1, 2)
    with pytest.raises(IndexError):
        s.classes(3)


def test_registry_views():
    reg = ClassRegistry(TaskSchedule(((1, 2), (3,), (4, 5))), 2)
    assert reg.known == (1, 2, 3)
    assert reg.unknown == (4, 5)
    assert reg.previously_known == (1, 2)
    assert reg.current == (3,)
    assert reg.index_of(3) == 2
    with pytest.raises(IndexError):
        ClassRegistry(reg.schedule, 4)


def _rec(i, classes):
    anns = tuple(Annotation(c, BoundingBox(2 * k, 0, 2 * k + 1, 1)) for k, c in enumerate(classes))
    return ImageRecord(f"im{i}", 64, 64, anns)


def test_task_view_keeps_only_current_labels_and_drops_empty_images():
    reg = ClassRegistry(TaskSchedule(((1, 2), (3,))), 1)
    data = [_rec(0, [1, 3]), _rec(1, [3]), _rec(2, [2, 2])]
    v2 = make_task_view(data, reg, 2)
    assert [r.image_id for r in v2] == ["im0", "im1"]
    assert all(a.class_id == 3 for r in v2 for a in r.annotations)
    v1 = make_task_view(data, reg, 1)
    assert [r.image_id for r in v1] == ["im0", "im2"]


def test_merge_views_unions_annotations():
    reg = ClassRegistry(TaskSchedule(((1,), (3,))), 1)
    data = [_rec(0, [1, 3]), _rec(1, [3])]
    merged = merge_views(make_task_view(data, reg, 1), make_task_view(data, reg, 2))
    assert [r.image_id for r in merged] == ["im0", "im1"]
    assert sorted(a.class_id for a in merged[0].annotations) == [1, 3]
    # the same view twice adds nothing
    again = merge_views(merged, merged)
    assert len(again[0].annotations) == 2


def test_detection_validation():
    Detection(UNKNOWN, 0.5, BoundingBox(0, 0, 1, 1), "objectness")
    with pytest.raises(ValueError):
        Detection(1, 1.5, BoundingBox(0, 0, 1, 1))
    with pytest.raises(ValueError):
        Detection(1, 0.5, BoundingBox(0, 0, 1, 1), "magic")
