import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st

from owrcnn import continual
from owrcnn.continual import (
    ContinualConfig,
    ExemplarStore,
    ExemplarWarning,
    build_exemplar_set,
    run_task,
    task_views,
)
from owrcnn.datasets import SceneConfig, generate_dataset
from owrcnn.structures import Annotation, BoundingBox, ImageRecord, TaskSchedule
from owrcnn.training import TrainConfig, base_model

import oracles


def _images(spec):
    box = BoundingBox(0, 0, 4, 4)
    return [ImageRecord(i, 16, 16, tuple(Annotation(c, box) for c in cls)) for i, cls in spec]


def _ids(ex):
    return ex.image_ids


def test_exemplar_trace_fifo_eviction_and_stop():
    spec = [("a", [1]), ("b", [1, 1]), ("c", [2]), ("d", [1]), ("e", [2]), ("f", [1, 2])]
    # queues: a -> q1 [a]; b -> q1 [b, b]; c -> q2 [c]; d -> q1 [b, d]; e -> q2 [c, e], both full: stop
    ex = build_exemplar_set(_images(spec), [1, 2], 2, task=1)
    assert _ids(ex) == ["b", "c", "d", "e"]
    assert ex.instance_counts == {1: 3, 2: 2} and ex.under_sampled == []
    assert _ids(ex) == oracles.exemplar_trace(spec, [1, 2], 2)


def test_exemplar_trace_ignores_other_classes():
    spec = [("a", [1]), ("b", [1, 2]), ("c", [2])]
    ex = build_exemplar_set(_images(spec), [2], 1)
    assert _ids(ex) == ["b"] == oracles.exemplar_trace(spec, [2], 1)


def test_exemplar_trace_single_slot_queues():
    spec = [("a", [1]), ("b", [1]), ("c", [2]), ("d", [1])]
    # a fills q1 but q2 is empty so the loop continues; b evicts a; c completes
    ex = build_exemplar_set(_images(spec), [1, 2], 1)
    assert _ids(ex) == ["b", "c"] == oracles.exemplar_trace(spec, [1, 2], 1)


def test_exemplar_trace_exhausted_data_warns():
    spec = [("a", [1]), ("b", [2])]
    with pytest.warns(ExemplarWarning, match="exhausted"):
        ex = build_exemplar_set(_images(spec), [1, 2], 3)
    assert _ids(ex) == ["a", "b"] == oracles.exemplar_trace(spec, [1, 2], 3)
    assert ex.under_sampled == [1, 2]


def test_exemplar_missing_class_warns_and_bad_n():
    with pytest.warns(ExemplarWarning, match="no instances"):
        build_exemplar_set(_images([("a", [1])]), [1, 5], 1)
    with pytest.raises(ValueError):
        build_exemplar_set([], [1], 0)


@given(
    st.lists(st.lists(st.integers(1, 4), max_size=4), max_size=25),
    st.integers(1, 4),
)
def test_exemplar_matches_oracle_and_invariants(labels, n):
    spec = [(f"i{k}", cls) for k, cls in enumerate(labels)]
    classes = [1, 2, 3]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ExemplarWarning)
        ex = build_exemplar_set(_images(spec), classes, n)
        again = build_exemplar_set(_images(spec), classes, n)
    assert _ids(ex) == oracles.exemplar_trace(spec, classes, n)
    assert _ids(ex) == _ids(again)
    # every class with at least n instances in the data gets at least n in the set
    totals = {c: sum(cls.count(c) for _, cls in spec) for c in classes}
    for c in classes:
        assert ex.instance_counts[c] >= min(n, totals[c])
        assert (c in ex.under_sampled) == (ex.instance_counts[c] < n)


def test_store_union_and_missing_task():
    store = ExemplarStore(n=1)
    store.add(build_exemplar_set(_images([("a", [1])]), [1], 1, task=1), 10)
    store.add(build_exemplar_set(_images([("a", [2]), ("b", [2])]), [2], 1, task=2), 10)
    union = store.union(2)
    assert [r.image_id for r in union] == ["a"]
    assert sorted(x.class_id for x in union[0].annotations) == [1, 2]
    with pytest.raises(KeyError):
        store.union(3)
    assert store.manifest()["1"]["image_ids"] == ["a"]


@pytest.fixture(scope="module")
def tiny_world():
    scene = SceneConfig(
        image_size=128,
        shape_classes=(("circle", "any"), ("square", "any"), ("triangle", "any"), ("star", "any")),
        seed=3,
    )
    return generate_dataset(scene, 24)


def test_later_tasks_train_only_on_exemplar_unions(tiny_world, monkeypatch):
    schedule = TaskSchedule(((1, 2), (3, 4)))
    calls = []

    def spy(model, dataset, cfg, known, prior_classes=(), history=None):
        calls.append(([r.image_id for r in dataset], tuple(known), tuple(prior_classes)))
        return model

    monkeypatch.setattr(continual, "train", spy)
    provider = task_views(tiny_world, schedule)
    cfg = ContinualConfig(train=TrainConfig(epochs=1), exemplar_n=2, gmm_min_samples=1)
    store = ExemplarStore(n=2, max_fraction=1.0)
    base = base_model(0)
    s1 = run_task(1, schedule, provider, base, store, cfg)
    s2 = run_task(2, schedule, provider, base, store, cfg, s1)

    assert calls[0][0] == [r.image_id for r in provider(1)]
    union = {r.image_id for r in store.sets[1].records} | {r.image_id for r in store.sets[2].records}
    assert set(calls[1][0]) == union
    assert len(union) < len(provider(1)) + len(provider(2))
    assert calls[1][1] == (1, 2, 3, 4) and calls[1][2] == (1, 2)
    assert s2.train_image_ids == calls[1][0]
    # task 2 starts from the shared base, not from the task-1 weights
    assert len(calls) == 2


def test_conventional_regime_trains_on_new_data_then_exemplars(tiny_world, monkeypatch):
    schedule = TaskSchedule(((1, 2), (3, 4)))
    calls = []

    def spy(model, dataset, cfg, known, prior_classes=(), history=None):
        calls.append(([r.image_id for r in dataset], cfg.lr))
        return model

    monkeypatch.setattr(continual, "train", spy)
    provider = task_views(tiny_world, schedule)
    cfg = ContinualConfig(train=TrainConfig(epochs=1), exemplar_n=2, gmm_min_samples=1, fine_tune_only=False)
    store = ExemplarStore(n=2, max_fraction=1.0)
    base = base_model(0)
    s1 = run_task(1, schedule, provider, base, store, cfg)
    run_task(2, schedule, provider, base, store, cfg, s1)
    assert calls[1][0] == [r.image_id for r in provider(2)]
    assert calls[2][1] == pytest.approx(cfg.train.lr * 0.1)
    with pytest.raises(ValueError):
        run_task(2, schedule, provider, base, ExemplarStore(n=2, max_fraction=1.0, sets=dict(store.sets)), cfg, None)


def test_task_two_needs_stored_exemplars(tiny_world):
    schedule = TaskSchedule(((1, 2), (3, 4)))
    with pytest.raises(KeyError):
        run_task(2, schedule, task_views(tiny_world, schedule), base_model(0), ExemplarStore(), ContinualConfig())


def test_exemplar_fraction_on_default_pool():
    scene = SceneConfig(
        shape_classes=(("circle", "any"), ("square", "any"), ("triangle", "any"), ("star", "any"), ("cross", "any")),
        class_ids=(1, 2, 3, 4, 5),
        class_weights=(1, 1, 1, 0.25, 0.25),
        seed=1,
    )
    pool = generate_dataset(scene, 200)
    view = task_views(pool, TaskSchedule(((1, 2, 3), (4, 5))))(1)
    ex = build_exemplar_set(view, [1, 2, 3], 10)
    assert len(ex.records) <= 0.2 * len(view)
    assert min(ex.instance_counts.values()) >= 10
