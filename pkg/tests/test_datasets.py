import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from owrcnn.datasets import (
    COLORS,
    SHAPES,
    SceneConfig,
    SceneError,
    attach_rasters,
    generate_dataset,
    generate_scene,
    ingest_coco,
    parse_coco,
    read_schedule,
    save_rasters,
    shape_mask,
    to_coco,
    write_coco,
    write_schedule,
)
from owrcnn.structures import TaskSchedule, iou_matrix


@pytest.mark.parametrize("shape", SHAPES)
def test_shape_masks_are_substantial(shape):
    m = shape_mask(shape, 21, 17)
    assert m.shape == (17, 21)
    assert 0.25 < m.mean() <= 1.0


def test_unknown_shape_rejected():
    with pytest.raises(ValueError):
        shape_mask("blob", 5, 5)
    with pytest.raises(ValueError):
        SceneConfig(shape_classes=(("blob", "red"),))
    with pytest.raises(ValueError):
        SceneConfig(shape_classes=(("circle", "mauve"),))


def test_scene_is_deterministic_per_seed_and_index():
    cfg = SceneConfig(seed=3)
    a, b = generate_scene(cfg, 5), generate_scene(cfg, 5)
    assert a == b
    assert np.array_equal(a.raster, b.raster)
    assert generate_scene(cfg, 6).image_id != a.image_id


@given(st.integers(0, 10_000), st.integers(0, 50))
def test_scene_invariants(seed, index):
    cfg = SceneConfig(seed=seed, image_size=96, objects_per_image=(1, 4))
    rec = generate_scene(cfg, index)
    assert rec.raster.shape == (96, 96, 3) and rec.raster.dtype == np.uint8
    assert 1 <= len(rec.annotations) <= 4
    assert all(1 <= a.class_id <= cfg.num_classes for a in rec.annotations)
    boxes = np.array([a.box.as_array() for a in rec.annotations])
    ious = iou_matrix(boxes, boxes)
    np.fill_diagonal(ious, 0)
    assert (ious == 0).all()
    for a in rec.annotations:
        x1, y1, x2, y2 = map(int, a.box.as_array())
        patch = rec.raster[y1:y2, x1:x2]
        # an object is painted in one flat colour, the most frequent one in its box
        colours, counts = np.unique(patch.reshape(-1, 3), axis=0, return_counts=True)
        flat = (patch == colours[np.argmax(counts)]).all(axis=2)
        # tight boxes: that colour reaches the first and last row and column
        assert flat[0].any() and flat[-1].any() and flat[:, 0].any() and flat[:, -1].any()


def test_too_many_objects_is_reported():
    cfg = SceneConfig(image_size=32, objects_per_image=(30, 30), scale_range=(0.4, 0.5), max_placement_tries=20)
    with pytest.raises(SceneError):
        generate_scene(cfg, 0)


def test_class_restriction_and_weights():
    cfg = SceneConfig(class_ids=(2, 5), class_weights=(1.0, 0.0), objects_per_image=(2, 3))
    data = generate_dataset(cfg, 20)
    assert {a.class_id for r in data for a in r.annotations} == {2}
    with pytest.raises(ValueError):
        SceneConfig(class_ids=(2, 5), class_weights=(1.0,))


def test_generate_dataset_rejects_empty():
    with pytest.raises(ValueError):
        generate_dataset(SceneConfig(), 0)


def test_schedule_needing_undefined_classes_refused():
    cfg = SceneConfig(shape_classes=(("circle", "red"), ("square", "any")))
    with pytest.raises(ValueError, match="only 2"):
        cfg.check_schedule(TaskSchedule(((1, 2), (3,))))


def test_coco_round_trip_and_byte_identical_writes(tmp_path):
    cfg = SceneConfig(seed=1)
    data = generate_dataset(cfg, 6)
    doc = to_coco(data, cfg.categories())
    back = parse_coco(json.loads(json.dumps(doc)))
    assert [r.annotations for r in back] == [r.annotations for r in data]
    write_coco(data, cfg.categories(), tmp_path / "a.json")
    write_coco(generate_dataset(cfg, 6), cfg.categories(), tmp_path / "b.json")
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


@pytest.mark.parametrize("fmt", ["npz", "png"])
def test_rasters_round_trip(tmp_path, fmt):
    data = generate_dataset(SceneConfig(seed=2), 3)
    target = tmp_path / ("r.npz" if fmt == "npz" else "imgs")
    save_rasters(data, target)
    write_coco(data, SceneConfig().categories(), tmp_path / "ann.json")
    loaded = ingest_coco(tmp_path / "ann.json", target)
    for a, b in zip(data, loaded):
        assert np.array_equal(a.raster, b.raster)
        assert a.annotations == b.annotations


def test_ingest_errors(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ValueError, match="malformed"):
        ingest_coco(bad)
    doc = {"images": [{"id": 1, "width": 10, "height": 10}], "categories": [{"id": 1}, {"id": 9}],
           "annotations": [{"id": 1, "image_id": 1, "category_id": 9, "bbox": [0, 0, 2, 2]}]}
    f = tmp_path / "x.json"
    f.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="unknown category"):
        ingest_coco(f, schedule=TaskSchedule(((1,),)))
    doc["images"] = [{"id": 1}]
    f.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="dimensions"):
        ingest_coco(f)
    with pytest.raises(ValueError, match="missing list"):
        parse_coco({"images": []})


def test_schedule_file_round_trip(tmp_path):
    s = TaskSchedule(((1, 2), (3,)))
    write_schedule(s, tmp_path / "s.json")
    assert read_schedule(tmp_path / "s.json") == s


def test_shipped_coco_split_is_a_partition_of_80_categories():
    from pathlib import Path

    s = read_schedule(Path(__file__).parents[1] / "configs" / "coco_superclass_split.json")
    assert len(s) == 4
    assert len(s.universe) == 80 == len(set(s.universe))


def test_any_colour_draws_from_palette():
    cfg = SceneConfig(shape_classes=(("square", "any"),), color_jitter=0, background_noise=0, clutter_level=0,
                      objects_per_image=(1, 1))
    seen = set()
    for i in range(30):
        rec = generate_scene(cfg, i)
        x1, y1, x2, y2 = map(int, rec.annotations[0].box.as_array())
        seen.add(tuple(rec.raster[(y1 + y2) // 2, (x1 + x2) // 2]))
    assert seen <= {tuple(v) for v in COLORS.values()}
    assert len(seen) > 3
