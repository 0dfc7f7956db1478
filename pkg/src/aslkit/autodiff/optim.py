"""Adam with a linear warm-up / cosine decay learning-rate multiplier."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .engine import Array


class NumericalError(FloatingPointError):
    pass


def lr_multiplier(step: float, total_steps: float, warmup_steps: float) -> float:
    """Learning-rate multiplier at ``step`` (0-based, may be fractional).

    Ramps linearly from 0 to 1 over ``warmup_steps`` and then follows a half
    cosine from 1 down to 0 at ``total_steps``.
    """
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if warmup_steps > 0 and step < warmup_steps:
        return step / warmup_steps
    span = max(total_steps - warmup_steps, 1e-12)
    frac = min(max((step - warmup_steps) / span, 0.0), 1.0)
    return 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, Array],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    lr_scale: dict[str, float] | None = None,
) -> AdamState:
    """Apply one Adam update in place to ``params``.

    Parameters without an entry in ``grads`` are left untouched.  Non-finite
    gradients abort the step before any parameter is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.count_nonzero(np.isfinite(g)))
            raise NumericalError(f"non-finite gradient for {name!r} ({bad} entries); step aborted")
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        p.data = p.data - step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
