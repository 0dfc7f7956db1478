import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aslkit.core import TimeSegment, build_pyramid
from aslkit.postprocess import (
    MQ_MAX_KEEP,
    NLQ_MAX_KEEP,
    DensePrediction,
    SegmentPrediction,
    decode_dense,
    ensemble_mean_logits,
    ensemble_topk_merge,
    hard_nms,
    soft_nms,
)


def P(s, e, score, label=0, vid="v"):
    return SegmentPrediction(vid, TimeSegment(s, e), label, score)


def logit(p):
    return math.log(p / (1 - p))


def test_decode_clips_to_video():
    pyr = build_pyramid(4, 1)
    dense = DensePrediction(
        "v", np.full((4, 1), logit(0.5)), np.array([[2.0, 1.0]] * 4), pyr, duration=4.0
    )
    out = decode_dense(dense)
    assert all(0.0 <= p.start < p.end <= 4.0 for p in out)
    assert out[0].start == 0.0 and out[0].end == 1.0


def test_decode_score_floor_and_topk():
    pyr = build_pyramid(4, 1)
    logits = np.array([[logit(0.9)], [logit(0.0005)], [logit(0.3)], [logit(0.6)]])
    dense = DensePrediction("v", logits, np.ones((4, 2)), pyr, duration=10.0)
    out = decode_dense(dense, score_floor=0.001, pre_nms_topk=2)
    assert [round(p.score, 6) for p in out] == [0.9, 0.6]


def test_decode_respects_valid_mask():
    pyr = build_pyramid(4, 1)
    dense = DensePrediction("v", np.zeros((4, 1)), np.ones((4, 2)), pyr, 10.0, valid=np.array([1, 1, 0, 0], bool))
    assert len(decode_dense(dense)) == 2


def test_soft_nms_identical_pair():
    out = soft_nms([P(1, 3, 0.9), P(1, 3, 0.8)], sigma=0.5)
    assert out[0].score == 0.9
    assert abs(out[1].score - 0.10826822658929017) <= 1e-12


def test_soft_nms_disjoint_untouched():
    out = soft_nms([P(0, 1, 0.9), P(2, 3, 0.8)])
    assert [p.score for p in out] == [0.9, 0.8]


def test_soft_nms_per_class():
    out = soft_nms([P(1, 3, 0.9, 0), P(1, 3, 0.8, 1)], per_class=True)
    assert out[1].score == 0.8
    out = soft_nms([P(1, 3, 0.9, 0), P(1, 3, 0.8, 1)], per_class=False)
    assert out[1].score < 0.8


preds_st = st.lists(
    st.tuples(st.floats(0, 50), st.floats(0.1, 20), st.floats(0.002, 1.0), st.integers(0, 2)),
    min_size=1,
    max_size=40,
).map(lambda xs: [P(s, s + d, sc, c) for s, d, sc, c in xs])


@given(preds_st, st.sampled_from([MQ_MAX_KEEP, NLQ_MAX_KEEP, 3]))
def test_soft_nms_properties(preds, keep):
    out = soft_nms(preds, max_keep=keep)
    assert len(out) <= keep
    assert out[0].score == max(p.score for p in preds)
    scores = [p.score for p in out]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    orig = {}
    for p in preds:
        orig.setdefault((p.start, p.end, p.label), []).append(p.score)
    for p in out:
        assert p.score <= max(orig[(p.start, p.end, p.label)]) + 1e-15


def test_hard_nms_drops_overlaps():
    out = hard_nms([P(0, 10, 0.9), P(1, 10, 0.8), P(20, 30, 0.5)], 0.5, 10)
    assert [p.score for p in out] == [0.9, 0.5]


def _dense(vid, seed, n=6, C=2):
    rng = np.random.default_rng(seed)
    return DensePrediction(vid, rng.normal(size=(n, C)), rng.uniform(0.5, 2, size=(n, 2)), build_pyramid(n, 1), 6.0)


def test_ensemble_of_identical_is_identity():
    d = _dense("v", 0)
    e = ensemble_mean_logits([d, d, d])
    np.testing.assert_array_equal(e.cls_logits, d.cls_logits)
    np.testing.assert_array_equal(e.offsets, d.offsets)


def test_ensemble_mean_and_shape_check():
    a, b = _dense("v", 0), _dense("v", 1)
    e = ensemble_mean_logits([a, b])
    np.testing.assert_allclose(e.cls_logits, (a.cls_logits + b.cls_logits) / 2)
    with pytest.raises(ValueError):
        ensemble_mean_logits([a, _dense("v", 2, C=3)])
    with pytest.raises(ValueError):
        ensemble_mean_logits([a, _dense("w", 1)])
    with pytest.raises(ValueError):
        ensemble_mean_logits([])


def test_topk_merge():
    a = [P(0, 1, 0.9), P(0, 2, 0.2)]
    b = [P(1, 2, 0.5), P(1, 3, 0.4), P(2, 3, 0.3), P(3, 4, 0.25)]
    out = ensemble_topk_merge([a, b])
    assert [p.score for p in out] == [0.9, 0.5, 0.4, 0.3, 0.25]
