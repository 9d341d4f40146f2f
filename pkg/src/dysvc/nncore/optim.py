from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .layers import Parameter


class MissingGradientError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Parameter], state: OptimizerState) -> OptimizerState:
    """Apply one Adam update in place to every trainable parameter.

    Frozen parameters are skipped entirely, so their buffers and values stay
    untouched.  A trainable parameter without a gradient is an error: it
    almost always means the parameter set passed in does not match the loss.
    """
    trainable = {name: p for name, p in params.items() if p.trainable}
    missing = sorted(name for name, p in trainable.items() if p.grad is None)
    if missing:
        raise MissingGradientError(f"no gradient for trainable parameters: {missing}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**t
    correction2 = 1.0 - b2**t
    for name, p in trainable.items():
        g = p.grad
        m = state.first_moment.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        else:
            v = state.second_moment[name]
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        update = state.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + state.epsilon)
        p.data = (p.data - update).astype(p.dtype, copy=False)
    return state


def zero_grads(params: Mapping[str, Parameter]) -> None:
    for p in params.values():
        p.grad = None


def grad_norm(param: Parameter) -> float:
    return 0.0 if param.grad is None else float(np.sqrt(np.sum(param.grad.astype(np.float64) ** 2)))
