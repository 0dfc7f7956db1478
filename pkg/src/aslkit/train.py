"""Training, dense inference, decoding and evaluation workflows."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NumericalError, adam_step, lr_multiplier
from .core import PointTargets, Pyramid, VideoAnnotation, assign_labels, build_pyramid
from .data_io import (
    DatasetManifest,
    RunConfig,
    load_video_features,
    model_config_from,
    query_annotations,
)
from .losses import LossConfig, info_nce, weighted_cls_loss, weighted_loc_loss
from .metrics import EvalReport, evaluate_mq, evaluate_nlq
from .network import Batch, Model, ModelConfig, make_batch
from .postprocess import DensePrediction, SegmentPrediction, decode_dense, ensemble_mean_logits, soft_nms
from .sensitivity import SensitivityParams, point_weights

log = logging.getLogger(__name__)


@dataclass
class Sample:
    """One training/eval unit: a video (moment queries) or a (video, query) pair."""

    sample_id: str
    video_id: str
    features: list[np.ndarray]
    annotation: VideoAnnotation
    stride_seconds: float
    duration: float
    tokens: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.features[0].shape[0]


def load_samples(manifest: DatasetManifest, split: str | None) -> list[Sample]:
    samples = []
    for entry in manifest.split(split):
        feats = load_video_features(manifest, entry)
        if manifest.mode == "mq":
            samples.append(Sample(entry.video_id, entry.video_id, feats, entry.annotation(), entry.stride_seconds, entry.duration))
        else:
            for q in query_annotations(manifest, entry):
                samples.append(
                    Sample(q.query_id, entry.video_id, feats, q.as_video_annotation(entry.duration), entry.stride_seconds, entry.duration, q.tokens)
                )
    if not samples:
        raise ValueError(f"split {split!r} of the manifest is empty")
    return samples


def loss_config_from(run: RunConfig) -> LossConfig:
    return LossConfig(
        focal_alpha=run["loss.focal_alpha"],
        focal_gamma=run["loss.focal_gamma"],
        nce_temperature=run["loss.nce_temperature"],
        lambda_cls=run["loss.lambda_cls"],
        lambda_loc=run["loss.lambda_loc"],
        lambda_nce=run["loss.lambda_nce"],
    )


def sensitivity_from(run: RunConfig, num_classes: int) -> SensitivityParams:
    if not run["loss.asl"]:
        return SensitivityParams.frozen_flat(num_classes, sigma_max=run["loss.sigma_max"])
    return SensitivityParams.init(
        num_classes,
        mu=run["loss.mu_init"],
        sigma=run["loss.sigma_init"],
        sigma_min=run["loss.sigma_min"],
        sigma_max=run["loss.sigma_max"],
    )


def collate(samples: list[Sample], levels: int, pad_to: int | None = None) -> Batch:
    tokens = [s.tokens for s in samples] if samples[0].tokens is not None else None
    return make_batch(
        [s.features for s in samples],
        [s.stride_seconds for s in samples],
        levels,
        ids=[s.sample_id for s in samples],
        tokens=tokens,
        pad_to=pad_to,
    )


@dataclass
class BatchTargets:
    labels: np.ndarray  # (B*N,)
    offsets: np.ndarray  # (B*N, 2)
    in_mask: np.ndarray
    valid: np.ndarray
    pos_labels: np.ndarray
    pos_positions: np.ndarray
    pos_groups: np.ndarray
    frame_pos: list[np.ndarray] = field(default_factory=list)


def point_targets(sample: Sample, T_pad: int, levels: int, valid: np.ndarray) -> tuple[Pyramid, PointTargets]:
    pyr = build_pyramid(T_pad, levels, sample.stride_seconds)
    return pyr, assign_labels(pyr, sample.annotation, valid=valid)


def batch_targets(samples: list[Sample], batch: Batch, point_mask: np.ndarray, levels: int) -> BatchTargets:
    labels, offsets, in_mask, valid = [], [], [], []
    pos_labels, pos_positions, pos_groups, frame_pos = [], [], [], []
    for b, s in enumerate(samples):
        pyr, tg = point_targets(s, batch.T, levels, point_mask[b])
        labels.append(tg.labels)
        offsets.append(tg.offsets)
        in_mask.append(tg.in_mask)
        valid.append(point_mask[b])
        idx = np.nonzero(tg.in_mask)[0]
        segs = np.array([[i.segment.start, i.segment.end] for i in s.annotation.instances]).reshape(-1, 2)
        m = tg.matched[idx]
        if idx.size:
            pos_positions.append((pyr.t[idx] - segs[m, 0]) / (segs[m, 1] - segs[m, 0]))
            pos_labels.append(tg.labels[idx])
            pos_groups.append(b * 1_000_000 + m)
        # level-0 frames inside any ground truth (contrastive positives)
        t0 = np.arange(batch.T) * s.stride_seconds
        inside = np.zeros(batch.T, dtype=bool)
        for lo, hi in segs:
            inside |= (t0 >= lo) & (t0 <= hi)
        frame_pos.append(inside & batch.mask[b])
    cat = np.concatenate
    return BatchTargets(
        labels=cat(labels),
        offsets=cat(offsets),
        in_mask=cat(in_mask),
        valid=cat(valid),
        pos_labels=cat(pos_labels) if pos_labels else np.zeros(0, dtype=np.int64),
        pos_positions=cat(pos_positions) if pos_positions else np.zeros(0),
        pos_groups=cat(pos_groups) if pos_groups else np.zeros(0, dtype=np.int64),
        frame_pos=frame_pos,
    )


@dataclass
class LossParts:
    total: ad.Array
    cls: float
    loc: float
    nce: float
    n_pos: int
    h_cls: np.ndarray
    h_loc: np.ndarray


def compute_loss(model: Model, sens: SensitivityParams, samples: list[Sample], loss_cfg: LossConfig) -> LossParts:
    """Total objective for one batch: cls + lambda_loc * loc (+ lambda_nce * nce)."""
    cfg = model.config
    batch = collate(samples, cfg.levels)
    out = model(batch)
    B, N, C = out.cls_logits.shape
    tg = batch_targets(samples, batch, out.point_mask, cfg.levels)
    h_cls = point_weights(sens, "cls", tg.pos_labels, tg.pos_positions, tg.pos_groups)
    h_loc = point_weights(sens, "loc", tg.pos_labels, tg.pos_positions, tg.pos_groups)
    n_pos = int(tg.in_mask.sum())
    l_cls = weighted_cls_loss(
        ad.reshape(out.cls_logits, (B * N, C)),
        tg.labels,
        tg.in_mask,
        h_cls if n_pos else None,
        valid=tg.valid,
        alpha=loss_cfg.focal_alpha,
        gamma=loss_cfg.focal_gamma,
    )
    l_loc = weighted_loc_loss(ad.reshape(out.offsets, (B * N, 2)), tg.offsets, tg.in_mask, h_loc if n_pos else None)
    total = ad.add(ad.mul(loss_cfg.lambda_cls, l_cls), ad.mul(loss_cfg.lambda_loc, l_loc))
    nce_val = 0.0
    if cfg.mode == "nlq":
        frames = out.level_feats[0]
        terms = [
            info_nce(frames[b], out.query_feat[b], tg.frame_pos[b], loss_cfg.nce_temperature, valid=batch.mask[b])
            for b in range(B)
        ]
        l_nce = ad.div(ad.sum_(ad.stack(terms)), float(B))
        nce_val = float(l_nce.data)
        total = ad.add(total, ad.mul(loss_cfg.lambda_nce, l_nce))
    return LossParts(total, float(l_cls.data), float(l_loc.data), nce_val, n_pos, h_cls.data.copy(), h_loc.data.copy())


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    cls: float
    loc: float
    nce: float
    n_pos: int
    h_cls_mean: float
    h_cls_std: float
    h_loc_mean: float
    h_loc_std: float
    mu_cls: list[float]
    sigma_cls: list[float]
    mu_loc: list[float]
    sigma_loc: list[float]
    seconds: float

    COLUMNS = (
        "epoch", "lr", "loss", "cls", "loc", "nce", "n_pos", "h_cls_mean", "h_cls_std",
        "h_loc_mean", "h_loc_std", "mu_cls", "sigma_cls", "mu_loc", "sigma_loc", "seconds",
    )

    def row(self) -> str:
        vals = []
        for c in self.COLUMNS:
            v = getattr(self, c)
            if isinstance(v, list):
                vals.append(",".join(f"{x:.6f}" for x in v))
            elif isinstance(v, float):
                vals.append(f"{v:.6f}")
            else:
                vals.append(str(v))
        return "\t".join(vals)


@dataclass
class TrainResult:
    model: Model
    sensitivity: SensitivityParams
    history: list[EpochRecord]

    def parameters(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.model.params.items()}
        out.update({k: v.data for k, v in self.sensitivity.named().items()})
        return out


def train(manifest: DatasetManifest, run: RunConfig, samples: list[Sample] | None = None, on_epoch=None) -> TrainResult:
    """Joint optimization of network weights and sensitivity Gaussians."""
    if samples is None:
        samples = load_samples(manifest, run["train.split"])
    mcfg = model_config_from(run, manifest)
    seed = run["train.seed"]
    model = Model.init(mcfg, seed=seed)
    sens = sensitivity_from(run, mcfg.num_classes)
    loss_cfg = loss_config_from(run)
    order_rng = np.random.default_rng([seed, 1])

    params = dict(model.params)
    sens_params = {k: v for k, v in sens.named().items() if v.requires_grad}
    params.update(sens_params)
    base_lr = run["train.lr"]
    lr_scale = {k: run["train.sens_lr"] / base_lr for k in sens_params}
    state = AdamState()
    bs = run["train.batch"]
    steps_per_epoch = math.ceil(len(samples) / bs)
    total = run["train.epochs"] * steps_per_epoch
    warmup = run["train.warmup_epochs"] * steps_per_epoch
    history: list[EpochRecord] = []
    step = 0
    for epoch in range(run["train.epochs"]):
        t0 = time.perf_counter()
        perm = order_rng.permutation(len(samples))
        sums = np.zeros(4)
        n_pos = 0
        h_cls_all, h_loc_all = [], []
        lr = 0.0
        for i in range(steps_per_epoch):
            chunk = [samples[j] for j in perm[i * bs : (i + 1) * bs]]
            parts = compute_loss(model, sens, chunk, loss_cfg)
            value = float(parts.total.data)
            if not math.isfinite(value):
                raise NumericalError(f"non-finite loss {value} at epoch {epoch} step {i}")
            if parts.n_pos == 0:
                log.warning("epoch %d step %d: batch without positive points", epoch, i)
            for p in params.values():
                p.grad = None
            parts.total.backward()
            grads = {k: p.grad for k, p in params.items() if p.grad is not None}
            lr = base_lr * lr_multiplier(step + 1, total, warmup)
            adam_step(params, grads, state, lr, run["train.beta1"], run["train.beta2"], run["train.eps"], lr_scale)
            sens.project()
            step += 1
            sums += (value, parts.cls, parts.loc, parts.nce)
            n_pos += parts.n_pos
            h_cls_all.append(parts.h_cls)
            h_loc_all.append(parts.h_loc)
        hc = np.concatenate(h_cls_all) if h_cls_all else np.zeros(1)
        hl = np.concatenate(h_loc_all) if h_loc_all else np.zeros(1)
        rec = EpochRecord(
            epoch=epoch,
            lr=lr,
            loss=sums[0] / steps_per_epoch,
            cls=sums[1] / steps_per_epoch,
            loc=sums[2] / steps_per_epoch,
            nce=sums[3] / steps_per_epoch,
            n_pos=n_pos,
            h_cls_mean=float(hc.mean()),
            h_cls_std=float(hc.std()),
            h_loc_mean=float(hl.mean()),
            h_loc_std=float(hl.std()),
            mu_cls=sens.mu_cls.data.tolist(),
            sigma_cls=sens.sigma_cls.data.tolist(),
            mu_loc=sens.mu_loc.data.tolist(),
            sigma_loc=sens.sigma_loc.data.tolist(),
            seconds=time.perf_counter() - t0,
        )
        history.append(rec)
        log.info(
            "epoch %d loss %.4f cls %.4f loc %.4f nce %.4f mu_cls %s sigma_cls %s",
            epoch, rec.loss, rec.cls, rec.loc, rec.nce,
            np.round(sens.mu_cls.data, 3).tolist(), np.round(sens.sigma_cls.data, 3).tolist(),
        )
        if on_epoch is not None:
            on_epoch(rec)
    return TrainResult(model, sens, history)


def model_from_params(config: ModelConfig, params: dict[str, np.ndarray]) -> tuple[Model, SensitivityParams]:
    net = {k: ad.Array(v) for k, v in params.items() if not k.startswith("sens.")}
    model = Model(config, net)
    fresh = Model.init(config, seed=0)
    missing = set(fresh.params) - set(net)
    extra = set(net) - set(fresh.params)
    if missing or extra:
        raise ValueError(f"checkpoint does not match model config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for k, p in fresh.params.items():
        if p.shape != net[k].shape:
            raise ValueError(f"parameter {k} has shape {net[k].shape}, config expects {p.shape}")
    C = config.num_classes
    if "sens.mu_cls" in params:
        sens = SensitivityParams(*(ad.Array(params[f"sens.{n}"]) for n in ("mu_cls", "sigma_cls", "mu_loc", "sigma_loc")))
    else:
        sens = SensitivityParams.frozen_flat(C)
    return model, sens


def predict_dense(model: Model, samples: list[Sample], batch_size: int = 8) -> list[DensePrediction]:
    """Dense numpy outputs per sample, computed without recording a tape."""
    cfg = model.config
    for p in model.params.values():
        p.requires_grad = False
    try:
        out_list = []
        for i in range(0, len(samples), batch_size):
            chunk = samples[i : i + batch_size]
            batch = collate(chunk, cfg.levels)
            out = model(batch)
            for b, s in enumerate(chunk):
                pyr = build_pyramid(batch.T, cfg.levels, s.stride_seconds)
                out_list.append(
                    DensePrediction(
                        s.sample_id,
                        out.cls_logits.data[b].copy(),
                        out.offsets.data[b].copy(),
                        pyr,
                        s.duration,
                        out.point_mask[b].copy(),
                    )
                )
        return out_list
    finally:
        for p in model.params.values():
            p.requires_grad = True


def decode_all(dense: list[DensePrediction], run: RunConfig, mode: str) -> list[SegmentPrediction]:
    preds = []
    max_keep = run["decode.max_keep"] if mode == "mq" else min(run["decode.max_keep"], 5)
    for d in dense:
        cand = decode_dense(d, run["decode.score_floor"], run["decode.pre_nms_topk"])
        preds.extend(
            soft_nms(cand, run["decode.nms_sigma"], run["decode.min_score"], max_keep, per_class=(mode == "mq"))
        )
    return preds


def ensemble_dense(per_model: list[list[DensePrediction]]) -> list[DensePrediction]:
    if not per_model:
        raise ValueError("no models to ensemble")
    n = len(per_model[0])
    if any(len(m) != n for m in per_model):
        raise ValueError("models produced different numbers of samples")
    return [ensemble_mean_logits([m[i] for m in per_model]) for i in range(n)]


def group_by_sample(preds: list[SegmentPrediction]) -> dict[str, list[SegmentPrediction]]:
    out: dict[str, list[SegmentPrediction]] = {}
    for p in preds:
        out.setdefault(p.video_id, []).append(p)
    return out


def evaluate(preds: list[SegmentPrediction], samples: list[Sample], run: RunConfig, mode: str, threads: int = 1) -> EvalReport:
    if mode == "mq":
        return evaluate_mq(
            preds,
            [s.annotation for s in samples],
            thresholds=run["eval.thresholds"],
            recall_k=run["eval.recall_k"],
            recall_tiou=run["eval.recall_tiou"],
            threads=threads,
        )
    gt = {s.sample_id: s.annotation.instances[0].segment for s in samples}
    return evaluate_nlq(group_by_sample(preds), gt, ks=run["eval.nlq_ks"], tious=run["eval.nlq_tious"])
