"""Videos, ground-truth instances, pyramid geometry and point label assignment.

Time is kept in continuous seconds.  A feature step lasts ``stride_seconds``;
the pyramid point ``j`` on level ``l`` sits at ``j * 2**l * stride_seconds``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BACKGROUND = -1


@dataclass(frozen=True)
class TimeSegment:
    start: float
    end: float

    def __post_init__(self):
        if not (math.isfinite(self.start) and math.isfinite(self.end)):
            raise ValueError(f"segment bounds must be finite: {self}")
        if self.start < 0:
            raise ValueError(f"segment start must be >= 0, got {self.start}")
        if not self.end > self.start:
            raise ValueError(f"segment must have positive duration, got [{self.start}, {self.end}]")

    @property
    def duration(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class ActionInstance:
    segment: TimeSegment
    label: int

    def __post_init__(self):
        if self.label < 0:
            raise ValueError(f"label must be non-negative, got {self.label}")


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    duration: float
    instances: tuple[ActionInstance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.duration <= 0:
            raise ValueError(f"{self.video_id}: duration must be positive")
        tol = 1e-9 * max(1.0, self.duration)
        for inst in self.instances:
            if inst.segment.end > self.duration + tol:
                raise ValueError(f"{self.video_id}: instance {inst.segment} exceeds duration {self.duration}")

    def check_labels(self, num_classes: int) -> None:
        for inst in self.instances:
            if inst.label >= num_classes:
                raise ValueError(f"{self.video_id}: label {inst.label} outside [0, {num_classes})")


@dataclass(frozen=True, eq=False)
class FeatureSequence:
    video_id: str
    data: np.ndarray
    stride_seconds: float = 1.0

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValueError(f"{self.video_id}: features must be T x D with T, D >= 1, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{self.video_id}: features contain non-finite values")
        if self.stride_seconds <= 0:
            raise ValueError("stride_seconds must be positive")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def D(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class PyramidPoint:
    t_center: float
    level: int
    stride: int
    range_min: float
    range_max: float


@dataclass(frozen=True)
class Pyramid:
    """Column view of a list of :class:`PyramidPoint` (same order)."""

    t: np.ndarray
    level: np.ndarray
    stride: np.ndarray
    range_min: np.ndarray
    range_max: np.ndarray
    level_sizes: tuple[int, ...]
    stride_seconds: float

    def __len__(self) -> int:
        return len(self.t)

    def points(self) -> list[PyramidPoint]:
        return [
            PyramidPoint(float(t), int(lv), int(s), float(lo), float(hi))
            for t, lv, s, lo, hi in zip(self.t, self.level, self.stride, self.range_min, self.range_max)
        ]

    @classmethod
    def from_points(cls, points: list[PyramidPoint], stride_seconds: float = 1.0) -> "Pyramid":
        levels = np.array([p.level for p in points], dtype=np.int64)
        sizes = tuple(int(n) for n in np.bincount(levels)) if len(points) else ()
        return cls(
            t=np.array([p.t_center for p in points], dtype=np.float64),
            level=levels,
            stride=np.array([p.stride for p in points], dtype=np.int64),
            range_min=np.array([p.range_min for p in points], dtype=np.float64),
            range_max=np.array([p.range_max for p in points], dtype=np.float64),
            level_sizes=sizes,
            stride_seconds=stride_seconds,
        )


@dataclass(frozen=True, eq=False)
class PointTargets:
    """Per-point training targets.

    ``labels`` holds the class index or ``BACKGROUND``; ``offsets`` are
    (d_start, d_end) in seconds and zero on background points; ``matched`` is
    the index of the matched instance in the annotation or -1.
    """

    labels: np.ndarray
    offsets: np.ndarray
    matched: np.ndarray
    in_mask: np.ndarray
    bg_mask: np.ndarray

    @property
    def num_pos(self) -> int:
        return int(self.in_mask.sum())


def tiou(a: TimeSegment, b: TimeSegment) -> float:
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    return inter / union


def tiou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise tIoU between segment arrays of shape (n, 2) and (m, 2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    inter = np.clip(np.minimum(a[:, None, 1], b[None, :, 1]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0.0, None)
    union = (a[:, None, 1] - a[:, None, 0]) + (b[None, :, 1] - b[None, :, 0]) - inter
    return inter / union


def level_range(level: int, num_levels: int, stride_seconds: float = 1.0) -> tuple[float, float]:
    """Regression range (seconds) of a pyramid level.

    Level 0 starts at 0, level l covers (2**(l+1), 2**(l+2)] feature steps,
    and the top level is open-ended.
    """
    lo = 0.0 if level == 0 else 2.0 ** (level + 1) * stride_seconds
    hi = math.inf if level == num_levels - 1 else 2.0 ** (level + 2) * stride_seconds
    return lo, hi


def build_pyramid(T: int, L: int, stride_seconds: float = 1.0) -> Pyramid:
    if L < 1:
        raise ValueError(f"level count must be >= 1, got {L}")
    if T < 2 ** (L - 1):
        raise ValueError(f"sequence of length {T} too short for {L} pyramid levels (needs >= {2 ** (L - 1)})")
    ts, lvs, strides, los, his, sizes = [], [], [], [], [], []
    for lv in range(L):
        step = 2**lv
        n = -(-T // step)
        lo, hi = level_range(lv, L, stride_seconds)
        ts.append(np.arange(n, dtype=np.float64) * step * stride_seconds)
        lvs.append(np.full(n, lv, dtype=np.int64))
        strides.append(np.full(n, step, dtype=np.int64))
        los.append(np.full(n, lo))
        his.append(np.full(n, hi))
        sizes.append(n)
    return Pyramid(
        t=np.concatenate(ts),
        level=np.concatenate(lvs),
        stride=np.concatenate(strides),
        range_min=np.concatenate(los),
        range_max=np.concatenate(his),
        level_sizes=tuple(sizes),
        stride_seconds=stride_seconds,
    )


def assign_labels(points, annotation: VideoAnnotation, valid: np.ndarray | None = None) -> PointTargets:
    """Match every pyramid point to at most one ground-truth instance.

    A point is positive for instance g when it lies inside g (boundaries
    included) and its larger boundary distance falls in its level's regression
    range (exclusive below, inclusive above; level 0 includes 0).  Ties go to
    the shortest instance, then the lowest instance index.  ``valid`` masks out
    padded points, which become background.
    """
    pyr = points if isinstance(points, Pyramid) else Pyramid.from_points(list(points))
    n = len(pyr)
    labels = np.full(n, BACKGROUND, dtype=np.int64)
    offsets = np.zeros((n, 2), dtype=np.float64)
    matched = np.full(n, -1, dtype=np.int64)
    if annotation.instances and n:
        seg = np.array([[i.segment.start, i.segment.end] for i in annotation.instances])
        lab = np.array([i.label for i in annotation.instances], dtype=np.int64)
        d_s = pyr.t[:, None] - seg[None, :, 0]
        d_e = seg[None, :, 1] - pyr.t[:, None]
        inside = (d_s >= 0) & (d_e >= 0)
        reach = np.maximum(d_s, d_e)
        lo = pyr.range_min[:, None]
        in_range = ((reach > lo) | ((lo == 0) & (reach >= 0))) & (reach <= pyr.range_max[:, None])
        ok = inside & in_range
        if valid is not None:
            ok &= np.asarray(valid, dtype=bool)[:, None]
        lengths = np.broadcast_to(seg[:, 1] - seg[:, 0], ok.shape)
        cand = np.where(ok, lengths, np.inf)
        best = np.argmin(cand, axis=1)
        pos = np.isfinite(cand[np.arange(n), best])
        idx = np.nonzero(pos)[0]
        matched[idx] = best[idx]
        labels[idx] = lab[best[idx]]
        offsets[idx, 0] = d_s[idx, best[idx]]
        offsets[idx, 1] = d_e[idx, best[idx]]
    in_mask = matched >= 0
    return PointTargets(labels=labels, offsets=offsets, matched=matched, in_mask=in_mask, bg_mask=~in_mask)


@dataclass(frozen=True)
class QueryAnnotation:
    """A natural-language query over one video, answered by a single segment."""

    query_id: str
    video_id: str
    segment: TimeSegment
    tokens: np.ndarray = field(repr=False, compare=False, default=None)

    def as_video_annotation(self, duration: float) -> VideoAnnotation:
        return VideoAnnotation(self.query_id, duration, (ActionInstance(self.segment, 0),))
