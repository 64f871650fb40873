import numpy as np
import pytest
from hypothesis import given, strategies as st

from owrcnn.gmm import GaussianMixturePerClass, GmmStore
from owrcnn.inference import (
    BACKGROUND,
    DetectOptions,
    DumpError,
    RegionOutputs,
    Thresholds,
    calculate_class_scores_and_boxes,
    decide,
    handle_overconfident,
    nms,
    nms_indices,
    read_dump,
    threshold_relabel,
    unknown_branch,
    write_dump,
)
from owrcnn.structures import UNKNOWN, BoundingBox, Detection

import oracles
from conftest import boxes

TH = Thresholds()
KNOWN = (4, 7)


def _logits_for(probs):
    return np.log(np.asarray(probs, dtype=np.float64))


def _unit_gmm(cid, mean, floor):
    d = len(mean)
    return GaussianMixturePerClass(cid, np.ones(1), np.asarray([mean], dtype=np.float64), np.eye(d)[None], floor)


# --- unknown branch ---------------------------------------------------------


def branch_by_hand(probs, s_obj, th):
    """Literal transcription of the pseudocode for one region."""
    known = list(probs[:-1])
    unk, bg = 0.0, probs[-1]
    if max(known) < th.theta_conf:
        if s_obj > th.theta_obj:
            unk, bg = s_obj, 0.0
    return known + [unk, bg]


ALG1_FIXTURES = [
    # every known score below theta_conf and objectness above theta_obj: unknown fires
    ([0.02, 0.03, 0.95], 0.8, [0.02, 0.03, 0.8, 0.0]),
    # confident known class: guard on theta_conf not taken
    ([0.70, 0.10, 0.20], 0.9, [0.70, 0.10, 0.0, 0.20]),
    # low known scores but objectness below theta_obj: inner guard not taken
    ([0.01, 0.01, 0.98], 0.6, [0.01, 0.01, 0.0, 0.98]),
    # objectness equal to the threshold does not fire (strict inequality)
    ([0.01, 0.01, 0.98], 0.69, [0.01, 0.01, 0.0, 0.98]),
    # one known score exactly at theta_conf blocks the branch
    ([0.05, 0.01, 0.94], 0.9, [0.05, 0.01, 0.0, 0.94]),
]


@pytest.mark.parametrize("probs,s_obj,expected", ALG1_FIXTURES)
def test_unknown_branch_traces(probs, s_obj, expected):
    got = unknown_branch(np.array([probs]), np.array([s_obj]), TH)[0]
    assert got.tolist() == pytest.approx(expected, abs=0)
    assert branch_by_hand(probs, s_obj, TH) == pytest.approx(expected, abs=0)


def test_unknown_branch_single_region_boxes():
    logits = _logits_for([0.02, 0.03, 0.95])
    cb = np.array([[1, 1, 5, 5], [2, 2, 6, 6]], dtype=np.float64)
    ab = np.array([0, 0, 9, 9], dtype=np.float64)
    out = calculate_class_scores_and_boxes(logits, cb, ab, 0.8, TH, KNOWN)
    assert out.scores[UNKNOWN] == 0.8 and out.scores[BACKGROUND] == 0.0
    assert out.scores[4] == pytest.approx(0.02)
    assert out.boxes[UNKNOWN] == BoundingBox(0, 0, 9, 9)
    assert out.boxes[7] == BoundingBox(2, 2, 6, 6)


def test_unknown_branch_disabled_is_identity():
    p = np.array([[0.02, 0.03, 0.95]])
    out = unknown_branch(p, np.array([0.99]), TH, enabled=False)
    assert out.tolist() == [[0.02, 0.03, 0.0, 0.95]]


@given(st.lists(st.floats(0.001, 1.0), min_size=3, max_size=6), st.floats(0.0, 1.0))
def test_unknown_branch_matches_hand_rule(raw, s_obj):
    probs = np.asarray(raw) / np.sum(raw)
    got = unknown_branch(probs[None], np.array([s_obj]), TH)[0]
    assert got.tolist() == branch_by_hand(list(probs), s_obj, TH)


# --- mixture relabel --------------------------------------------------------


def relabel_by_hand(label, s_cls, logits, s_obj, gmm, th):
    if label != UNKNOWN and s_cls < th.theta_cls:
        if gmm is not None and gmm.log_likelihood(logits) < gmm.theta_like:
            return UNKNOWN, s_obj
    return label, s_cls


def test_relabel_traces():
    gmm = _unit_gmm(4, [2.0, 0.0, 0.0], floor=-6.0)
    store = GmmStore({4: gmm})
    near = np.array([2.0, 0.1, 0.0])  # log-likelihood about -2.76
    far = np.array([-3.0, 2.0, 2.0])  # about -19.3
    cases = [
        # low confidence and unlikely logits: relabelled with the objectness score
        ((4, 0.3, far, 0.77), (UNKNOWN, 0.77)),
        # low confidence but likely logits: likelihood guard not taken
        ((4, 0.3, near, 0.77), (4, 0.3)),
        # confident prediction: outer guard not taken even for unlikely logits
        ((4, 0.6, far, 0.77), (4, 0.6)),
        # s_cls equal to theta_cls is not below it
        ((4, 0.5, far, 0.77), (4, 0.5)),
        # no mixture for the class
        ((7, 0.3, far, 0.77), (7, 0.3)),
        # already unknown
        ((UNKNOWN, 0.3, far, 0.77), (UNKNOWN, 0.3)),
    ]
    for (label, s, logits, s_obj), expected in cases:
        assert handle_overconfident(label, s, logits, s_obj, store, TH) == expected
        assert relabel_by_hand(label, s, logits, s_obj, store.get(label), TH) == expected
    assert handle_overconfident(4, 0.3, far, 0.77, None, TH) == (4, 0.3)


def _regions(cls_probs, s_obj, class_boxes, agn_boxes):
    return RegionOutputs(
        "im",
        _logits_for(cls_probs),
        np.asarray(s_obj, dtype=np.float64),
        np.asarray(class_boxes, dtype=np.float64),
        np.asarray(agn_boxes, dtype=np.float64),
    )


def test_decide_uses_agnostic_box_for_unknown_and_class_box_after_relabel():
    cb = np.array([[[10, 10, 30, 30], [0, 0, 1, 1]], [[60, 60, 90, 90], [0, 0, 1, 1]]], dtype=np.float64)
    ab = np.array([[12, 12, 28, 28], [55, 55, 95, 95]], dtype=np.float64)
    # region 0 fires the unknown branch; region 1 is a 0.4-confidence class-4 prediction with unlikely logits
    r = _regions([[0.01, 0.01, 0.98], [0.4, 0.3, 0.3]], [0.9, 0.8], cb, ab)
    store = GmmStore({4: _unit_gmm(4, [5.0, -5.0, -5.0], floor=-3.0)})
    dets = decide(r, KNOWN, store, TH, DetectOptions())
    assert [(d.label, round(d.score, 6), d.box.as_array().tolist(), d.provenance) for d in dets] == [
        (UNKNOWN, 0.9, [12, 12, 28, 28], "objectness"),
        (UNKNOWN, 0.8, [60, 60, 90, 90], "objectness"),
    ]
    no_gmm = decide(r, KNOWN, store, TH, DetectOptions(gmm_correction=False))
    assert [d.label for d in no_gmm] == [UNKNOWN, 4]
    closed = decide(r, KNOWN, store, TH, DetectOptions(unknown_branch=False, gmm_correction=False))
    assert [d.label for d in closed] == [4]  # region 0 is background without the unknown branch


def test_decide_score_floor_and_cap():
    n = 5
    probs = [[0.9 - 0.2 * i, 0.05 + 0.2 * i - 0.01, 0.06] for i in range(4)] + [[0.02, 0.02, 0.96]]
    cb = np.stack([np.array([[i * 20, 0, i * 20 + 15, 15]] * 2, dtype=np.float64) for i in range(n)])
    r = _regions(probs, [0.1] * n, cb, cb[:, 0])
    dets = decide(r, KNOWN, None, TH, DetectOptions(max_detections=3))
    assert len(dets) == 3
    assert all(a.score >= b.score for a, b in zip(dets, dets[1:]))


# --- NMS --------------------------------------------------------------------


@given(
    st.lists(st.tuples(boxes(), st.floats(0.0, 1.0), st.integers(0, 2)), max_size=12),
    st.sampled_from([0.3, 0.5, 0.7]),
)
def test_nms_matches_oracle(items, thr):
    b = [tuple(i[0].as_array()) for i in items]
    s = [i[1] for i in items]
    lab = [i[2] for i in items]
    got = nms_indices(np.array(b).reshape(-1, 4), np.array(s), np.array(lab), thr).tolist()
    assert got == oracles.nms(b, s, lab, thr)


def test_nms_keeps_other_labels():
    box = BoundingBox(0, 0, 10, 10)
    dets = [Detection(1, 0.9, box), Detection(1, 0.8, box), Detection(UNKNOWN, 0.7, box, "objectness")]
    assert nms(dets) == [dets[0], dets[2]]
    assert nms([]) == []


def test_threshold_relabel_baseline():
    box = BoundingBox(0, 0, 1, 1)
    out = threshold_relabel([Detection(3, 0.1, box), Detection(3, 0.2, box), Detection(UNKNOWN, 0.05, box)], TH)
    assert [d.label for d in out] == [UNKNOWN, 3, UNKNOWN]


def test_thresholds_validated():
    with pytest.raises(ValueError):
        Thresholds(theta_obj=1.0)
    with pytest.raises(ValueError):
        Thresholds(theta_conf=0.0)


# --- dump -------------------------------------------------------------------


def test_dump_round_trip(tmp_path):
    dets = {
        "a": [Detection(3, 0.5, BoundingBox(1, 2, 11, 22)), Detection(UNKNOWN, 0.75, BoundingBox(0, 0, 4, 4), "objectness")],
        "b": [Detection(1, 0.125, BoundingBox(5.5, 6.5, 7.5, 9.0))],
    }
    p = tmp_path / "d.jsonl"
    write_dump(p, dets)
    assert read_dump(p) == dets


@pytest.mark.parametrize(
    "bad",
    [
        "not json",
        '{"image_id": "a", "score": 0.5, "box": [0, 0, 1, 1]}',
        '{"image_id": "a", "label": 1, "score": 1.5, "box": [0, 0, 1, 1]}',
        '{"image_id": "a", "label": 1, "score": 0.5, "box": [0, 0, -1, 1]}',
        '{"image_id": "a", "label": 1, "score": 0.5, "box": [0, 0, 1, 1], "provenance": "oracle"}',
    ],
)
def test_dump_errors_name_the_line(tmp_path, bad):
    p = tmp_path / "d.jsonl"
    good = '{"image_id": "a", "label": 1, "score": 0.5, "box": [0, 0, 1, 1]}'
    p.write_text(good + "\n\n" + bad + "\n")
    with pytest.raises(DumpError, match=r"d\.jsonl:3:"):
        read_dump(p)
