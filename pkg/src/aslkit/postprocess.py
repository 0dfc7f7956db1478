"""Dense output decoding, Soft-NMS and model ensembling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Pyramid, TimeSegment, tiou_matrix

MQ_MAX_KEEP = 2000
NLQ_MAX_KEEP = 5


@dataclass(frozen=True)
class SegmentPrediction:
    video_id: str
    segment: TimeSegment
    label: int
    score: float

    @property
    def start(self) -> float:
        return self.segment.start

    @property
    def end(self) -> float:
        return self.segment.end


@dataclass
class DensePrediction:
    """Numpy dense outputs of one video: logits (N, C), offsets (N, 2) in seconds.

    ``points`` carries point times in seconds; ``valid`` masks padded points.
    """

    video_id: str
    cls_logits: np.ndarray
    offsets: np.ndarray
    points: Pyramid
    duration: float
    valid: np.ndarray | None = None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


def decode_dense(
    dense: DensePrediction,
    score_floor: float = 0.001,
    pre_nms_topk: int = 5000,
) -> list[SegmentPrediction]:
    """Turn every (point, class) with sigmoid score >= ``score_floor`` into a segment.

    Segments are clipped to [0, duration]; segments that collapse to zero
    length after clipping are dropped.  At most ``pre_nms_topk`` candidates,
    highest score first.
    """
    scores = _sigmoid(np.asarray(dense.cls_logits, dtype=np.float64))
    if dense.valid is not None:
        scores = np.where(np.asarray(dense.valid, dtype=bool)[:, None], scores, -1.0)
    pt, cls = np.nonzero(scores >= score_floor)
    if pt.size == 0:
        return []
    sc = scores[pt, cls]
    # highest score first; ties resolved by point then class index
    order = np.lexsort((cls, pt, -sc))[:pre_nms_topk]
    pt, cls, sc = pt[order], cls[order], sc[order]
    t = dense.points.t[pt]
    start = np.clip(t - dense.offsets[pt, 0], 0.0, dense.duration)
    end = np.clip(t + dense.offsets[pt, 1], 0.0, dense.duration)
    out = []
    for s, e, c, p in zip(start, end, cls, sc):
        if e > s:
            out.append(SegmentPrediction(dense.video_id, TimeSegment(float(s), float(e)), int(c), float(p)))
    return out


def soft_nms(
    preds: list[SegmentPrediction],
    sigma: float = 0.5,
    min_score: float = 0.001,
    max_keep: int = MQ_MAX_KEEP,
    per_class: bool = True,
) -> list[SegmentPrediction]:
    """Gaussian Soft-NMS: each pick decays overlapping scores by exp(-tIoU^2 / sigma).

    With ``per_class`` only same-label predictions decay each other.  Stops
    after ``max_keep`` picks or once the best remaining score is below
    ``min_score``.  Output is sorted by final score.
    """
    if not preds:
        return []
    segs = np.array([[p.start, p.end] for p in preds])
    scores = np.array([p.score for p in preds], dtype=np.float64)
    labels = np.array([p.label for p in preds])
    alive = np.ones(len(preds), dtype=bool)
    keep: list[SegmentPrediction] = []
    while len(keep) < max_keep and alive.any():
        cand = np.where(alive, scores, -np.inf)
        i = int(np.argmax(cand))
        if scores[i] < min_score:
            break
        alive[i] = False
        p = preds[i]
        keep.append(SegmentPrediction(p.video_id, p.segment, p.label, float(scores[i])))
        others = alive if not per_class else alive & (labels == labels[i])
        idx = np.nonzero(others)[0]
        if idx.size:
            iou = tiou_matrix(segs[i : i + 1], segs[idx])[0]
            scores[idx] *= np.exp(-(iou**2) / sigma)
    return keep


def hard_nms(preds: list[SegmentPrediction], iou_threshold: float, max_keep: int, per_class: bool = True):
    """Classic NMS: drop every prediction overlapping a kept one by more than the threshold."""
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    keep: list[SegmentPrediction] = []
    for i in order:
        p = preds[i]
        if len(keep) >= max_keep:
            break
        clash = False
        for q in keep:
            if per_class and q.label != p.label:
                continue
            if tiou_matrix([[p.start, p.end]], [[q.start, q.end]])[0, 0] > iou_threshold:
                clash = True
                break
        if not clash:
            keep.append(p)
    return keep


def ensemble_mean_logits(outputs: list[DensePrediction]) -> DensePrediction:
    """Elementwise mean of classification logits and of offsets across models."""
    if not outputs:
        raise ValueError("ensemble needs at least one output")
    ref = outputs[0]
    for o in outputs[1:]:
        if o.cls_logits.shape != ref.cls_logits.shape or o.offsets.shape != ref.offsets.shape:
            raise ValueError(
                f"ensemble shape mismatch for {ref.video_id}: "
                f"{o.cls_logits.shape}/{o.offsets.shape} vs {ref.cls_logits.shape}/{ref.offsets.shape}"
            )
        if o.video_id != ref.video_id:
            raise ValueError(f"ensemble mixes videos {ref.video_id!r} and {o.video_id!r}")
    # mean written as ref + mean(o - ref): bit-identical to ref when all inputs are
    cls = ref.cls_logits + np.mean(np.stack([o.cls_logits - ref.cls_logits for o in outputs]), axis=0)
    off = ref.offsets + np.mean(np.stack([o.offsets - ref.offsets for o in outputs]), axis=0)
    return DensePrediction(ref.video_id, cls, off, ref.points, ref.duration, ref.valid)


def ensemble_topk_merge(pred_lists: list[list[SegmentPrediction]], k_out: int = NLQ_MAX_KEEP):
    """Pool several ranked lists and keep the ``k_out`` highest raw scores.

    Scores are compared as-is across models; ties keep list order.
    """
    pooled = [p for lst in pred_lists for p in lst]
    pooled.sort(key=lambda p: -p.score)
    return pooled[:k_out]
