from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from .layers import Parameter
from .tensor import NonFiniteError, Tensor


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Parameter],
    probe_count: int = 20,
    perturbation: float = 1e-6,
    seed: int = 0,
) -> float:
    """Largest relative error between backprop and central differences.

    Coordinates are drawn uniformly over all trainable entries.  The error for
    one coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.  Parameters must
    already be float64; float32 does not have the headroom for this.
    """
    trainable = [p for p in params.values() if p.trainable]
    for p in trainable:
        if p.dtype != np.float64:
            raise TypeError(f"gradient_check needs float64 parameters, {p.name or 'parameter'} is {p.dtype}")
        p.grad = None
    loss = loss_fn()
    _check_finite(loss)
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in trainable]

    sizes = np.array([p.size for p in trainable])
    if sizes.sum() == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(probe_count, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    for idx in flat:
        which = int(np.searchsorted(offsets, idx, side="right") - 1)
        p = trainable[which]
        coord = np.unravel_index(int(idx - offsets[which]), p.shape)
        original = p.data[coord]
        p.data[coord] = original + perturbation
        up = _check_finite(loss_fn()).item()
        p.data[coord] = original - perturbation
        down = _check_finite(loss_fn()).item()
        p.data[coord] = original
        numeric = (up - down) / (2.0 * perturbation)
        a = float(analytic[which][coord])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, err)
    for p in trainable:
        p.grad = None
    return worst


def _check_finite(loss: Tensor) -> Tensor:
    if not np.all(np.isfinite(loss.data)):
        raise NonFiniteError("loss is not finite")
    return loss
