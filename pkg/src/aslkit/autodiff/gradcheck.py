"""Central finite-difference checks for the autodiff engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .engine import Array


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """Elementwise |a - n| / max(|a|, |n|, floor).

    The floor keeps gradients that are zero up to round-off from producing
    spurious large ratios; above it this is the plain relative error.
    """
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def numeric_grad(f: Callable[[], float], arr: Array, eps: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``f()`` w.r.t. entries of ``arr`` (perturbed in place)."""
    flat = arr.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = np.zeros(len(indices) if not isinstance(indices, range) else flat.size)
    for n, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        out[n] = (fp - fm) / (2.0 * eps)
    return out


def check_gradients(
    loss_fn: Callable[[], Array],
    params: Sequence[Array],
    eps: float = 1e-5,
    samples: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error between analytic and finite-difference gradients.

    ``loss_fn`` must rebuild the graph on every call.  With ``samples`` set,
    that many (parameter, entry) pairs are drawn at random instead of checking
    every entry.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    def f():
        return float(loss_fn().data)

    worst = 0.0
    if samples is None:
        for p, a in zip(params, analytic):
            num = numeric_grad(f, p, eps)
            worst = max(worst, float(relative_error(a.reshape(-1), num).max(initial=0.0)))
        return worst

    rng = rng or np.random.default_rng(0)
    sizes = np.array([p.size for p in params], dtype=float)
    for _ in range(samples):
        j = int(rng.choice(len(params), p=sizes / sizes.sum()))
        i = int(rng.integers(params[j].size))
        num = numeric_grad(f, params[j], eps, indices=[i])[0]
        worst = max(worst, float(relative_error(analytic[j].reshape(-1)[i], num)))
    return worst
