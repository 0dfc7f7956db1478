"""Brute-force reference metrics.

Deliberately naive: plain Python loops, no shared helpers with
:mod:`aslkit.metrics` beyond the input types.  Used to cross-check the
vectorized implementations.
"""
from __future__ import annotations


def _overlap(a0, a1, b0, b1):
    inter = min(a1, b1) - max(a0, b0)
    if inter <= 0:
        return 0.0
    return inter / ((a1 - a0) + (b1 - b0) - inter)


def _ranked(preds):
    return sorted(preds, key=lambda p: (-p.score, p.start, p.video_id, p.end, p.label))


def _hits(ranked, gt_items, thr):
    """gt_items: list of (video_id, start, end) in annotation order."""
    taken = [False] * len(gt_items)
    hits = []
    for p in ranked:
        best, best_j = -1.0, -1
        for j, (vid, s, e) in enumerate(gt_items):
            if taken[j] or vid != p.video_id:
                continue
            o = _overlap(p.start, p.end, s, e)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= thr:
            taken[best_j] = True
            hits.append(True)
        else:
            hits.append(False)
    return hits


def _gt_items(gts, label):
    return [
        (a.video_id, i.segment.start, i.segment.end) for a in gts for i in a.instances if i.label == label
    ]


def ap_reference(preds, gts, label, thr):
    items = _gt_items(gts, label)
    ranked = _ranked([p for p in preds if p.label == label])
    hits = _hits(ranked, items, thr)
    precisions = []
    tp = 0
    for n, h in enumerate(hits, start=1):
        tp += h
        precisions.append(tp / n)
    total = 0.0
    for k, h in enumerate(hits):
        if h:
            total += max(precisions[k:])
    return total / len(items)


def average_map_reference(preds, gts, thresholds):
    labels = sorted({i.label for a in gts for i in a.instances})
    per_thr = []
    for thr in thresholds:
        aps = [ap_reference(preds, gts, c, thr) for c in labels]
        per_thr.append(sum(aps) / len(aps))
    return per_thr, sum(per_thr) / len(per_thr)


def recall_at_kx_reference(preds, gts, k, thr):
    labels = sorted({i.label for a in gts for i in a.instances})
    matched = 0
    total = 0
    for c in labels:
        items = _gt_items(gts, c)
        ranked = _ranked([p for p in preds if p.label == c])[: k * len(items)]
        matched += sum(_hits(ranked, items, thr))
        total += len(items)
    return matched / total


def recall_at_k_queries_reference(per_query_preds, per_query_gt, k, thr):
    hits = 0
    for qid, seg in per_query_gt.items():
        top = _ranked(per_query_preds.get(qid, []))[:k]
        if any(_overlap(p.start, p.end, seg.start, seg.end) >= thr for p in top):
            hits += 1
    return hits / len(per_query_gt)
