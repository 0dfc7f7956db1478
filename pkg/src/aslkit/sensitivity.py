"""Learnable class-aware Gaussian frame weights.

Each class owns one Gaussian per sub-task (classification, localization) over
the normalized position of a point inside its matched instance.  Weights of an
instance's positive points are divided by their mean, so only the distribution
of loss mass across frames is learned, never its total.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Array
from .core import ActionInstance, PyramidPoint

TASKS = ("cls", "loc")

SIGMA_MIN = 0.1
# Large enough that exp(-(t - mu)^2 / (2 sigma^2)) is 1 to ~5e-9 on [0, 1].
SIGMA_MAX = 1.0e4
MU_INIT = 0.5
SIGMA_INIT = 2.0


@dataclass
class SensitivityParams:
    mu_cls: Array
    sigma_cls: Array
    mu_loc: Array
    sigma_loc: Array
    sigma_min: float = SIGMA_MIN
    sigma_max: float = SIGMA_MAX

    @classmethod
    def init(
        cls,
        num_classes: int,
        mu: float = MU_INIT,
        sigma: float = SIGMA_INIT,
        trainable: bool = True,
        sigma_min: float = SIGMA_MIN,
        sigma_max: float = SIGMA_MAX,
    ) -> "SensitivityParams":
        def full(v):
            return Array(np.full(num_classes, v, dtype=np.float64), requires_grad=trainable)

        out = cls(full(mu), full(sigma), full(mu), full(sigma), sigma_min, sigma_max)
        out.project()
        return out

    @classmethod
    def frozen_flat(cls, num_classes: int, sigma_max: float = SIGMA_MAX) -> "SensitivityParams":
        """Sensitivity switched off: sigma pinned at its upper clamp, nothing trainable."""
        return cls.init(num_classes, sigma=sigma_max, trainable=False, sigma_max=sigma_max)

    @property
    def num_classes(self) -> int:
        return self.mu_cls.shape[0]

    def named(self) -> dict[str, Array]:
        return {
            "sens.mu_cls": self.mu_cls,
            "sens.sigma_cls": self.sigma_cls,
            "sens.mu_loc": self.mu_loc,
            "sens.sigma_loc": self.sigma_loc,
        }

    def task(self, task: str) -> tuple[Array, Array]:
        if task == "cls":
            return self.mu_cls, self.sigma_cls
        if task == "loc":
            return self.mu_loc, self.sigma_loc
        raise ValueError(f"unknown sub-task {task!r}; expected one of {TASKS}")

    def project(self) -> None:
        """Clamp mu to [0, 1] and sigma to [sigma_min, sigma_max] in place."""
        for mu in (self.mu_cls, self.mu_loc):
            mu.data = np.clip(mu.data, 0.0, 1.0)
        for sg in (self.sigma_cls, self.sigma_loc):
            sg.data = np.clip(sg.data, self.sigma_min, self.sigma_max)


def normalized_position(point: PyramidPoint | float, instance: ActionInstance) -> float:
    t = point.t_center if isinstance(point, PyramidPoint) else float(point)
    seg = instance.segment
    if t < seg.start or t > seg.end:
        raise ValueError(f"point at t={t} lies outside instance [{seg.start}, {seg.end}]")
    return (t - seg.start) / seg.duration


def raw_weight(t, mu, sigma) -> Array:
    """exp(-(t - mu)^2 / (2 sigma^2)), differentiable in every argument."""
    d = ad.sub(t, mu)
    return ad.exp(ad.neg(ad.div(ad.mul(d, d), ad.mul(2.0, ad.mul(sigma, sigma)))))


def instance_weights(params: SensitivityParams, task: str, c: int, positions) -> Array:
    """Mean-one weights for the positive points of a single instance."""
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    if positions.size == 0:
        raise ValueError("instance has no positive points")
    mu, sigma = params.task(task)
    w = raw_weight(positions, ad.getitem(mu, c), ad.getitem(sigma, c))
    return ad.div(w, ad.mean(w))


def point_weights(
    params: SensitivityParams, task: str, labels: np.ndarray, positions: np.ndarray, groups: np.ndarray
) -> Array:
    """Vectorized :func:`instance_weights` over many instances at once.

    ``labels``, ``positions`` and ``groups`` describe the positive points of a
    batch; ``groups`` holds an instance id per point (any integers).  Returns
    one weight per point, with mean exactly one inside every group.
    """
    labels = np.asarray(labels, dtype=np.int64)
    positions = np.asarray(positions, dtype=np.float64)
    if positions.size == 0:
        return ad.constant(np.zeros(0))
    _, inverse, counts = np.unique(np.asarray(groups), return_inverse=True, return_counts=True)
    mu, sigma = params.task(task)
    w = raw_weight(positions, ad.take(mu, labels), ad.take(sigma, labels))
    # group means via a (groups x points) averaging matrix
    avg = np.zeros((len(counts), len(positions)))
    avg[inverse, np.arange(len(positions))] = 1.0 / counts[inverse]
    group_mean = ad.matmul(ad.constant(avg), ad.reshape(w, (-1, 1)))
    return ad.div(w, ad.reshape(ad.take(group_mean, inverse, axis=0), (-1,)))
