"""Detection and grounding metrics: average mAP, Recall@kx and query R@k.

Predictions are ranked by score (descending) with ties broken by earlier start,
then video id, end and label, so results never depend on input order.
"""
from __future__ import annotations

from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import TimeSegment, VideoAnnotation, tiou_matrix
from .postprocess import SegmentPrediction

MQ_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)
NLQ_KS = (1, 5)
NLQ_TIOUS = (0.3, 0.5)


class MetricError(ValueError):
    pass


def rank_key(p: SegmentPrediction):
    return (-p.score, p.start, p.video_id, p.end, p.label)


def _gt_by_class(gts: Iterable[VideoAnnotation]) -> dict[int, dict[str, np.ndarray]]:
    out: dict[int, dict[str, list]] = defaultdict(lambda: defaultdict(list))
    for ann in gts:
        for inst in ann.instances:
            out[inst.label][ann.video_id].append((inst.segment.start, inst.segment.end))
    return {c: {v: np.array(s, dtype=np.float64) for v, s in vids.items()} for c, vids in out.items()}


def _match(preds: Sequence[SegmentPrediction], gt: Mapping[str, np.ndarray], thresholds: Sequence[float]) -> np.ndarray:
    """Greedy matching in rank order; returns a (len(thresholds), len(preds)) TP table.

    Each prediction takes the unmatched ground truth of its video with the
    highest tIoU (first one on ties) if that tIoU reaches the threshold.
    """
    thr = np.asarray(thresholds, dtype=np.float64)
    tp = np.zeros((thr.size, len(preds)), dtype=bool)
    used = {v: np.zeros((thr.size, len(s)), dtype=bool) for v, s in gt.items()}
    by_video: dict[str, list[int]] = defaultdict(list)
    for i, p in enumerate(preds):
        by_video[p.video_id].append(i)
    for vid, idx in by_video.items():
        segs = gt.get(vid)
        if segs is None or len(segs) == 0:
            continue
        ious = tiou_matrix(np.array([[preds[i].start, preds[i].end] for i in idx]), segs)
        u = used[vid]
        for row, i in enumerate(idx):
            cand = np.where(u, -1.0, ious[row][None, :])
            j = np.argmax(cand, axis=1)
            best = cand[np.arange(thr.size), j]
            hit = best >= thr
            tp[hit, i] = True
            u[np.nonzero(hit)[0], j[hit]] = True
    return tp


def _ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0:
        raise MetricError("AP undefined without ground truth")
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, tp.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.sum(envelope[tp]) / n_gt)


def average_precision(preds: Sequence[SegmentPrediction], gts: Iterable[VideoAnnotation], tiou_threshold: float) -> float:
    """All-point interpolated AP for one class (inputs already filtered to it)."""
    gts = list(gts)
    labels = {i.label for a in gts for i in a.instances}
    if len(labels) > 1:
        raise MetricError(f"average_precision expects a single class, got {sorted(labels)}")
    gt = _gt_by_class(gts)
    gt_c = next(iter(gt.values())) if gt else {}
    n_gt = sum(len(s) for s in gt_c.values())
    ranked = sorted(preds, key=rank_key)
    return _ap_from_tp(_match(ranked, gt_c, [tiou_threshold])[0], n_gt)


@dataclass
class EvalReport:
    thresholds: tuple[float, ...] = ()
    map_per_threshold: dict[float, float] = field(default_factory=dict)
    average_map: float = float("nan")
    recall_at_kx: dict[tuple[int, float], float] = field(default_factory=dict)
    r_at_k: dict[tuple[int, float], float] = field(default_factory=dict)
    per_class_ap: dict[float, dict[int, float]] = field(default_factory=dict)
    pr_curves: dict[int, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    def as_dict(self) -> dict[str, float]:
        """Flat key -> value view used for the machine-readable report."""
        out: dict[str, float] = {}
        if self.map_per_threshold:
            for t in self.thresholds:
                out[f"map@{t:.1f}"] = self.map_per_threshold[t]
            out["average_map"] = self.average_map
        for (k, t), v in sorted(self.recall_at_kx.items()):
            out[f"recall@{k}x@{t:.1f}"] = v
        for (k, t), v in sorted(self.r_at_k.items()):
            out[f"R@{k}@{t:.1f}"] = v
        if self.r_at_k:
            r1 = [v for (k, _), v in self.r_at_k.items() if k == 1]
            if r1:
                out["mean_R@1"] = float(np.mean(r1))
        for t in sorted(self.per_class_ap):
            for c, v in sorted(self.per_class_ap[t].items()):
                out[f"ap@{t:.1f}/class{c}"] = v
        return out


def average_map(
    preds: Iterable[SegmentPrediction],
    gts: Iterable[VideoAnnotation],
    thresholds: Sequence[float] = MQ_THRESHOLDS,
    threads: int = 1,
    pr_threshold: float | None = 0.5,
) -> EvalReport:
    """mAP per tIoU threshold (mean over classes with ground truth) and their average."""
    gt = _gt_by_class(gts)
    if not gt:
        raise MetricError("no class has ground truth; mAP undefined")
    thresholds = tuple(float(t) for t in thresholds)
    by_class: dict[int, list[SegmentPrediction]] = defaultdict(list)
    for p in preds:
        by_class[p.label].append(p)
    classes = sorted(gt)

    def one(c):
        ranked = sorted(by_class.get(c, []), key=rank_key)
        tp = _match(ranked, gt[c], thresholds)
        n_gt = sum(len(s) for s in gt[c].values())
        aps = [_ap_from_tp(tp[i], n_gt) for i in range(len(thresholds))]
        curve = None
        if pr_threshold is not None:
            row = _match(ranked, gt[c], [pr_threshold])[0]
            ctp = np.cumsum(row)
            n = np.arange(1, row.size + 1)
            curve = (ctp / n_gt, ctp / n) if row.size else (np.zeros(0), np.zeros(0))
        return aps, curve

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, classes))
    else:
        results = [one(c) for c in classes]
    report = EvalReport(thresholds=thresholds)
    for i, t in enumerate(thresholds):
        report.per_class_ap[t] = {c: r[0][i] for c, r in zip(classes, results)}
        report.map_per_threshold[t] = float(np.mean(list(report.per_class_ap[t].values())))
    report.average_map = float(np.mean([report.map_per_threshold[t] for t in thresholds]))
    report.pr_curves = {c: r[1] for c, r in zip(classes, results) if r[1] is not None}
    return report


def recall_at_kx(preds: Iterable[SegmentPrediction], gts: Iterable[VideoAnnotation], k: int = 1, tiou: float = 0.5) -> float:
    """Recall when class c keeps only its top k * x_c predictions (x_c = its GT count).

    Micro-averaged: total matched ground truths over total ground truths.
    """
    gt = _gt_by_class(gts)
    total = sum(len(s) for vids in gt.values() for s in vids.values())
    if total == 0:
        raise MetricError("no ground truth; recall undefined")
    by_class: dict[int, list[SegmentPrediction]] = defaultdict(list)
    for p in preds:
        by_class[p.label].append(p)
    matched = 0
    for c, vids in gt.items():
        x = sum(len(s) for s in vids.values())
        ranked = sorted(by_class.get(c, []), key=rank_key)[: k * x]
        matched += int(_match(ranked, vids, [tiou])[0].sum())
    return matched / total


def recall_at_k_queries(
    per_query_preds: Mapping[str, Sequence[SegmentPrediction]],
    per_query_gt: Mapping[str, TimeSegment],
    k: int = 1,
    tiou: float = 0.5,
) -> float:
    """Fraction of queries with a top-k prediction at tIoU >= ``tiou``."""
    if not per_query_gt:
        raise MetricError("no queries")
    hits = 0
    for qid, seg in per_query_gt.items():
        ranked = sorted(per_query_preds.get(qid, ()), key=rank_key)[:k]
        if not ranked:
            continue
        ious = tiou_matrix(np.array([[p.start, p.end] for p in ranked]), np.array([[seg.start, seg.end]]))
        hits += bool((ious[:, 0] >= tiou).any())
    return hits / len(per_query_gt)


def evaluate_mq(preds, gts, thresholds=MQ_THRESHOLDS, recall_k: int = 1, recall_tiou: float = 0.5, threads: int = 1) -> EvalReport:
    preds = list(preds)
    gts = list(gts)
    report = average_map(preds, gts, thresholds, threads=threads)
    report.recall_at_kx[(recall_k, recall_tiou)] = recall_at_kx(preds, gts, recall_k, recall_tiou)
    return report


def evaluate_nlq(per_query_preds, per_query_gt, ks=NLQ_KS, tious=NLQ_TIOUS) -> EvalReport:
    report = EvalReport()
    for k in ks:
        for t in tious:
            report.r_at_k[(int(k), float(t))] = recall_at_k_queries(per_query_preds, per_query_gt, k, t)
    return report
