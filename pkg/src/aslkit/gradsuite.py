"""Finite-difference suite: every autodiff primitive plus full training graphs."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Array, check_gradients
from .core import ActionInstance, TimeSegment, VideoAnnotation
from .losses import LossConfig
from .network import Model, ModelConfig
from .sensitivity import SensitivityParams

EPS = 1e-5


@dataclass
class GradResult:
    name: str
    worst: float
    checked: int
    seconds: float


def _away_from_zero(rng, shape, margin=0.2):
    x = rng.uniform(margin, 1.5, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def primitive_cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list[np.ndarray]]]:
    """name -> (function of Arrays returning an Array, input arrays)."""
    n = rng.normal
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)  # noqa: E731
    mask = np.array([[True, True, False, True]])
    # distinct magnitudes keep max/min away from ties
    a_mm = np.array([[0.3, -1.2, 0.8], [1.1, -0.4, 2.0]])
    b_mm = np.array([[0.9, -0.7, 0.1], [0.2, -1.5, 1.4]])
    return {
        "add": (ad.add, [n(size=(3, 4)), n(size=(4,))]),
        "sub": (ad.sub, [n(size=(3, 4)), n(size=(3, 1))]),
        "mul": (ad.mul, [n(size=(3, 4)), n(size=(1, 4))]),
        "div": (ad.div, [n(size=(3, 4)), pos(3, 4)]),
        "neg": (ad.neg, [n(size=(5,))]),
        "power": (lambda a: ad.power(a, 2.5), [pos(5)]),
        "maximum": (ad.maximum, [a_mm, b_mm]),
        "minimum": (ad.minimum, [a_mm, b_mm]),
        "exp": (ad.exp, [n(size=(4,))]),
        "log": (ad.log, [pos(4)]),
        "sqrt": (ad.sqrt, [pos(4)]),
        "abs": (ad.abs_, [_away_from_zero(rng, (6,))]),
        "relu": (ad.relu, [_away_from_zero(rng, (6,))]),
        "gelu": (ad.gelu, [n(size=(6,))]),
        "sigmoid": (ad.sigmoid, [n(size=(6,))]),
        "softplus": (ad.softplus, [n(size=(6,))]),
        "tanh": (ad.tanh, [n(size=(6,))]),
        "sum": (lambda a: ad.sum_(a, axis=1, keepdims=True), [n(size=(3, 4))]),
        "mean": (lambda a: ad.mean(a, axis=0), [n(size=(3, 4))]),
        "softmax": (lambda a: ad.softmax(a, axis=-1), [n(size=(3, 4))]),
        "logsumexp": (lambda a: ad.logsumexp(a, axis=-1), [n(size=(3, 4))]),
        "layer_norm": (ad.layer_norm, [n(size=(3, 5))]),
        "matmul": (ad.matmul, [n(size=(2, 3, 4)), n(size=(4, 5))]),
        "matmul_batched": (ad.matmul, [n(size=(2, 3, 4)), n(size=(2, 4, 2))]),
        "reshape": (lambda a: ad.reshape(a, (4, 3)), [n(size=(3, 4))]),
        "transpose": (lambda a: ad.transpose(a, (2, 0, 1)), [n(size=(2, 3, 4))]),
        "getitem": (lambda a: ad.getitem(a, (slice(None), [0, 2, 2])), [n(size=(3, 4))]),
        "slice": (lambda a: ad.slice_(a, (slice(None), slice(1, 3))), [n(size=(3, 4))]),
        "take": (lambda a: ad.take(a, np.array([2, 0, 2, 1]), axis=0), [n(size=(3, 2))]),
        "concat": (lambda a, b: ad.concat([a, b], axis=1), [n(size=(2, 3)), n(size=(2, 1))]),
        "stack": (lambda a, b: ad.stack([a, b], axis=0), [n(size=(2, 3)), n(size=(2, 3))]),
        "masked_fill": (lambda a: ad.masked_fill(a, ~mask, 0.0), [n(size=(2, 4))]),
        "conv1d": (lambda x, w, b: ad.conv1d(x, w, b), [n(size=(2, 7, 3)), n(size=(3, 3, 4)), n(size=(4,))]),
        "conv1d_stride2": (lambda x, w: ad.conv1d(x, w, stride=2), [n(size=(1, 8, 2)), n(size=(3, 2, 3))]),
        "depthwise_conv1d": (lambda x, w, b: ad.depthwise_conv1d(x, w, b, stride=2), [n(size=(2, 8, 3)), n(size=(3, 3)), n(size=(3,))]),
        "attention": (
            lambda q, k, v: ad.scaled_dot_attention(q, k, v, key_mask=mask)[0],
            [n(size=(1, 3, 2)), n(size=(1, 4, 2)), n(size=(1, 4, 2))],
        ),
    }


def check_primitive(fn: Callable, inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    arrays = [Array(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    probe = fn(*arrays)
    weights = rng.normal(size=probe.shape)

    def loss():
        return ad.sum_(ad.mul(fn(*arrays), weights))

    return check_gradients(loss, arrays, EPS)


def check_primitives(seed: int = 0) -> list[GradResult]:
    rng = np.random.default_rng(seed)
    out = []
    for name, (fn, inputs) in primitive_cases(rng).items():
        t0 = time.perf_counter()
        worst = check_primitive(fn, inputs, rng)
        out.append(GradResult(name, worst, sum(np.size(x) for x in inputs), time.perf_counter() - t0))
    return out


def tiny_problem(mode: str, seed: int = 0):
    """A small model, random sensitivity and a two-video batch with positives."""
    # imported lazily: train pulls in data_io/metrics which import this module's siblings
    from .train import Sample

    rng = np.random.default_rng(seed)
    nlq = mode == "nlq"
    C = 1 if nlq else 3
    cfg = ModelConfig(
        input_dims=(5,), proj_dims=(8,), embed_dim=8, heads=2, depth=1, levels=2, head_layers=2,
        num_classes=C, mode=mode, text_dim=4 if nlq else 0,
    )
    model = Model.init(cfg, seed=seed)
    # move every parameter off its init so no gradient is trivially zero
    for p in model.params.values():
        p.data = p.data + 0.1 * rng.normal(size=p.shape)
    sens = SensitivityParams.init(C, sigma=0.6)
    sens.mu_cls.data = rng.uniform(0.2, 0.8, size=C)
    sens.mu_loc.data = rng.uniform(0.2, 0.8, size=C)
    sens.sigma_cls.data = rng.uniform(0.4, 0.9, size=C)
    sens.sigma_loc.data = rng.uniform(0.4, 0.9, size=C)
    samples = []
    T = 16
    for b in range(2):
        insts = (
            ActionInstance(TimeSegment(1.3, 6.7), int(rng.integers(C))),
            ActionInstance(TimeSegment(8.2, 14.6), int(rng.integers(C))),
        )
        if nlq:
            insts = insts[b : b + 1]
            insts = (ActionInstance(insts[0].segment, 0),)
        ann = VideoAnnotation(f"g{b}", float(T), insts)
        tokens = rng.normal(size=(3, 4)) if nlq else None
        samples.append(Sample(f"g{b}", f"g{b}", [rng.normal(size=(T, 5))], ann, 1.0, float(T), tokens))
    return model, sens, samples


def check_end_to_end(mode: str = "mq", samples: int = 60, seed: int = 0) -> GradResult:
    """Worst relative error over all sensitivity entries plus ``samples`` random weights."""
    from .train import compute_loss

    t0 = time.perf_counter()
    model, sens, batch = tiny_problem(mode, seed)
    cfg = LossConfig()

    def loss():
        return compute_loss(model, sens, batch, cfg).total

    sens_params = list(sens.named().values())
    worst_sens = check_gradients(loss, sens_params, EPS)
    net = list(model.params.values())
    worst_net = check_gradients(loss, net, EPS, samples=samples, rng=np.random.default_rng(seed + 1))
    checked = sum(p.size for p in sens_params) + samples
    return GradResult(f"end_to_end_{mode}", max(worst_sens, worst_net), checked, time.perf_counter() - t0)


def run_suite(seed: int = 0) -> list[GradResult]:
    return check_primitives(seed) + [check_end_to_end("mq", seed=seed), check_end_to_end("nlq", seed=seed)]
