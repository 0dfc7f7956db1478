"""Sensitivity-weighted focal, DIoU and InfoNCE objectives."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    nce_temperature: float = 0.07
    lambda_cls: float = 1.0
    lambda_loc: float = 1.0
    lambda_nce: float = 0.5

    def __post_init__(self):
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError(f"focal_alpha must be in (0, 1), got {self.focal_alpha}")
        if self.focal_gamma < 0:
            raise ValueError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if self.nce_temperature <= 0:
            raise ValueError(f"nce_temperature must be > 0, got {self.nce_temperature}")


def focal_loss(logits, targets, alpha: float = 0.25, gamma: float = 2.0) -> Array:
    """Elementwise sigmoid focal loss, evaluated in logit space.

    log p = -softplus(-x) and log(1 - p) = -softplus(x), so saturated logits
    never produce log(0).
    """
    x = ad.as_array(logits)
    y = np.asarray(targets, dtype=np.float64)
    nlog_p = ad.softplus(ad.neg(x))
    nlog_q = ad.softplus(x)
    if gamma == 0:
        pos, neg = nlog_p, nlog_q
    else:
        # (1 - p)^gamma = exp(-gamma softplus(x)), p^gamma = exp(-gamma softplus(-x))
        pos = ad.mul(ad.exp(ad.mul(-gamma, nlog_q)), nlog_p)
        neg = ad.mul(ad.exp(ad.mul(-gamma, nlog_p)), nlog_q)
    return ad.add(ad.mul(alpha * y, pos), ad.mul((1.0 - alpha) * (1.0 - y), neg))


def one_hot_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    pos = labels >= 0
    out[np.nonzero(pos)[0], labels[pos]] = 1.0
    return out


def weighted_cls_loss(
    cls_logits,
    labels: np.ndarray,
    in_mask: np.ndarray,
    h_cls=None,
    valid: np.ndarray | None = None,
    alpha: float = 0.25,
    gamma: float = 2.0,
) -> Array:
    """Focal classification loss with sensitivity weights on positive points.

    ``cls_logits`` is (N, C) over flattened points, ``labels`` the class per
    point (-1 for background) and ``h_cls`` one weight per positive point, in
    the order of ``np.nonzero(in_mask)``.  Background points are unweighted and
    the total is divided by max(1, N_pos).
    """
    x = ad.as_array(cls_logits)
    in_mask = np.asarray(in_mask, dtype=bool)
    valid = np.ones_like(in_mask) if valid is None else np.asarray(valid, dtype=bool)
    n_pos = int(in_mask.sum())
    if n_pos == 0:
        log.warning("classification loss on a batch without positive points; normalizing by 1")
    y = one_hot_targets(labels, x.shape[-1])
    per_point = ad.sum_(focal_loss(x, y, alpha, gamma), axis=-1)
    weights = np.where(valid, 1.0, 0.0)
    if h_cls is None or n_pos == 0:
        total = ad.sum_(ad.mul(per_point, weights))
    else:
        pos_idx = np.nonzero(in_mask)[0]
        bg = ad.sum_(ad.mul(per_point, np.where(in_mask, 0.0, weights)))
        pos = ad.sum_(ad.mul(ad.take(per_point, pos_idx), h_cls))
        total = ad.add(pos, bg)
    return ad.div(total, float(max(1, n_pos)))


def diou_loss_1d(pred_offsets, gt_offsets) -> Array:
    """1 - IoU + (centre distance / enclosing length)^2 for segments around a point.

    Both inputs are (N, 2) distances to start and end from the same anchor.
    """
    p = ad.as_array(pred_offsets)
    g = ad.as_array(gt_offsets)
    ps, pe = p[..., 0], p[..., 1]
    gs, ge = g[..., 0], g[..., 1]
    inter = ad.add(ad.minimum(ps, gs), ad.minimum(pe, ge))
    union = ad.sub(ad.add(ad.add(ps, pe), ad.add(gs, ge)), inter)
    enclose = ad.add(ad.maximum(ps, gs), ad.maximum(pe, ge))
    # centres relative to the anchor are (e - s) / 2
    rho = ad.mul(0.5, ad.sub(ad.sub(pe, ps), ad.sub(ge, gs)))
    iou = ad.div(inter, union)
    return ad.add(ad.sub(1.0, iou), ad.div(ad.mul(rho, rho), ad.mul(enclose, enclose)))


def weighted_loc_loss(loc_offsets, gt_offsets: np.ndarray, in_mask: np.ndarray, h_loc=None) -> Array:
    """Sensitivity-weighted DIoU over positive points divided by max(1, N_pos).

    ``loc_offsets`` and ``gt_offsets`` are (N, 2) over all points; ``h_loc``
    is one weight per positive point.
    """
    in_mask = np.asarray(in_mask, dtype=bool)
    pos_idx = np.nonzero(in_mask)[0]
    if pos_idx.size == 0:
        log.warning("localization loss on a batch without positive points; returning 0")
        return ad.mul(ad.sum_(ad.as_array(loc_offsets)), 0.0)
    pred = ad.take(ad.as_array(loc_offsets), pos_idx, axis=0)
    per_point = diou_loss_1d(pred, np.asarray(gt_offsets)[pos_idx])
    if h_loc is not None:
        per_point = ad.mul(per_point, h_loc)
    return ad.div(ad.sum_(per_point), float(pos_idx.size))


def cosine_similarity(frames, query, eps: float = 1e-8) -> Array:
    """Cosine similarity between each row of (T, D) ``frames`` and a (D,) ``query``."""
    f = ad.as_array(frames)
    q = ad.as_array(query)
    dots = ad.reshape(ad.matmul(f, ad.reshape(q, (-1, 1))), (-1,))
    fn = ad.sqrt(ad.add(ad.sum_(ad.mul(f, f), axis=-1), eps))
    qn = ad.sqrt(ad.add(ad.sum_(ad.mul(q, q)), eps))
    return ad.div(dots, ad.mul(fn, qn))


def info_nce_from_similarity(sim, pos_mask: np.ndarray, temperature: float = 0.07, valid=None) -> Array:
    """-mean over positive frames of log softmax(sim / tau) across all frames."""
    s = ad.as_array(sim)
    pos_mask = np.asarray(pos_mask, dtype=bool)
    valid = np.ones_like(pos_mask) if valid is None else np.asarray(valid, dtype=bool)
    pos = pos_mask & valid
    neg = ~pos_mask & valid
    if not pos.any() or not neg.any():
        log.warning("InfoNCE needs at least one positive and one negative frame; contributing 0")
        return ad.mul(ad.sum_(s), 0.0)
    logits = ad.div(s, temperature)
    if not valid.all():
        logits = ad.masked_fill(logits, ~valid, -np.inf)
    lse = ad.logsumexp(logits, axis=-1)
    pos_idx = np.nonzero(pos)[0]
    return ad.sub(lse, ad.mean(ad.take(logits, pos_idx)))


def info_nce(frame_feats, query_feat, pos_mask: np.ndarray, temperature: float = 0.07, valid=None) -> Array:
    return info_nce_from_similarity(cosine_similarity(frame_feats, query_feat), pos_mask, temperature, valid)
